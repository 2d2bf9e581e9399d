use std::collections::VecDeque;

use super::{LabelMask, ScalarField};

/// Label-change detector: 1 where any in-image pixel of the 3×3
/// neighbourhood carries a different label, else 0. This is dilation minus
/// erosion of label identity.
pub fn morphological_gradient(mask: &LabelMask) -> ScalarField {
    let (h, w) = mask.dims();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = mask.get(y, x);
            let differs = (y.saturating_sub(1)..(y + 2).min(h))
                .any(|ny| (x.saturating_sub(1)..(x + 2).min(w)).any(|nx| mask.get(ny, nx) != l));
            if differs {
                out[y * w + x] = 1.0;
            }
        }
    }
    ScalarField::from_raw(h, w, out)
}

/// Gives each 4-connected same-label region a unique positive id, assigned
/// in row-major order of first encounter. Background (0) stays 0.
pub fn connected_components(mask: &LabelMask) -> LabelMask {
    let (h, w) = mask.dims();
    let labels = mask.labels();
    let mut ids = vec![0u16; h * w];
    let mut next: u16 = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] == 0 || ids[start] != 0 {
            continue;
        }
        next = next.checked_add(1).expect("more than 65535 components");
        let l = labels[start];
        ids[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if labels[q] == l && ids[q] == 0 {
                    ids[q] = next;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    LabelMask::new(h, w, ids).expect("same dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gradient_examples() {
        assert!(morphological_gradient(&LabelMask::filled(3, 4, 2)).data().iter().all(|&v| v == 0.0));
        let m = LabelMask::from_rows(&[&[1, 1, 1, 2, 2, 2]]).unwrap();
        assert_eq!(morphological_gradient(&m).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let checker = LabelMask::from_fn(4, 5, |y, x| ((y + x) % 2) as u16 + 1);
        assert!(morphological_gradient(&checker).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn components_examples() {
        let m = LabelMask::from_rows(&[&[1, 1, 0, 1, 1]]).unwrap();
        assert_eq!(connected_components(&m).labels(), &[1, 1, 0, 2, 2]);
        let bg = LabelMask::filled(3, 3, 0);
        assert_eq!(connected_components(&bg), bg);
        // Diagonal contact does not connect.
        let d = LabelMask::from_rows(&[&[1, 0], &[0, 1]]).unwrap();
        assert_eq!(connected_components(&d).labels(), &[1, 0, 0, 2]);
        let blobs = LabelMask::from_rows(&[&[1, 1, 0, 0], &[0, 0, 0, 1], &[0, 0, 1, 1]]).unwrap();
        assert_eq!(connected_components(&blobs).labels(), &[1, 1, 0, 0, 0, 0, 0, 2, 0, 0, 2, 2]);
    }

    #[test]
    fn distinct_labels_touching_are_distinct_components() {
        let m = LabelMask::from_rows(&[&[1, 2, 2]]).unwrap();
        assert_eq!(connected_components(&m).labels(), &[1, 2, 2]);
    }

    proptest! {
        #[test]
        fn gradient_invariant_under_relabeling(
            (h, w, labels) in (1usize..=6, 1usize..=6).prop_flat_map(|(h, w)| {
                (Just(h), Just(w), proptest::collection::vec(0u16..4, h * w))
            }),
            perm in Just([0u16, 1, 2, 3]).prop_shuffle(),
        ) {
            let m = LabelMask::new(h, w, labels.clone()).unwrap();
            let relabeled = LabelMask::new(h, w, labels.iter().map(|&l| perm[l as usize] + 10).collect()).unwrap();
            prop_assert_eq!(morphological_gradient(&m), morphological_gradient(&relabeled));
        }
    }
}
