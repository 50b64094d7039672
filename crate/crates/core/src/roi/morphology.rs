//! Binary morphology with rectangular structuring elements.
//!
//! Out-of-image neighbours are ignored (neither dilated from nor eroded by),
//! which keeps closing extensive and opening anti-extensive up to the border.

use std::collections::VecDeque;

use crate::Mask;

fn window_op(mask: &Mask, rows: usize, cols: usize, dilate: bool) -> Mask {
    let (h, w) = mask.dim();
    let (rh, rw) = ((rows / 2) as isize, (cols / 2) as isize);
    Mask::from_shape_fn((h, w), |(r, c)| {
        let mut hit = !dilate;
        'outer: for dr in -rh..=rh {
            let rr = r as isize + dr;
            if rr < 0 || rr >= h as isize {
                continue;
            }
            for dc in -rw..=rw {
                let cc = c as isize + dc;
                if cc < 0 || cc >= w as isize {
                    continue;
                }
                let v = mask[[rr as usize, cc as usize]];
                if dilate && v {
                    hit = true;
                    break 'outer;
                }
                if !dilate && !v {
                    hit = false;
                    break 'outer;
                }
            }
        }
        hit
    })
}

pub fn dilate(mask: &Mask, rows: usize, cols: usize) -> Mask {
    window_op(mask, rows, cols, true)
}

pub fn erode(mask: &Mask, rows: usize, cols: usize) -> Mask {
    window_op(mask, rows, cols, false)
}

pub fn close(mask: &Mask, rows: usize, cols: usize) -> Mask {
    erode(&dilate(mask, rows, cols), rows, cols)
}

pub fn open(mask: &Mask, rows: usize, cols: usize) -> Mask {
    dilate(&erode(mask, rows, cols), rows, cols)
}

/// 8-connected component labels (0 = background) and component sizes
/// (`sizes[label - 1]`).
pub fn label_components(mask: &Mask) -> (ndarray::Array2<u32>, Vec<usize>) {
    let (h, w) = mask.dim();
    let mut labels = ndarray::Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for r0 in 0..h {
        for c0 in 0..w {
            if !mask[[r0, c0]] || labels[[r0, c0]] != 0 {
                continue;
            }
            let id = sizes.len() as u32 + 1;
            let mut size = 0;
            labels[[r0, c0]] = id;
            queue.push_back((r0, c0));
            while let Some((r, c)) = queue.pop_front() {
                size += 1;
                for dr in -1isize..=1 {
                    for dc in -1isize..=1 {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        let (rr, cc) = (rr as usize, cc as usize);
                        if mask[[rr, cc]] && labels[[rr, cc]] == 0 {
                            labels[[rr, cc]] = id;
                            queue.push_back((rr, cc));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

pub fn remove_small_components(mask: &Mask, min_area: usize) -> Mask {
    let (labels, sizes) = label_components(mask);
    labels.mapv(|l| l != 0 && sizes[l as usize - 1] >= min_area)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closing_fills_thin_gaps_and_opening_drops_specks() {
        let mut m = Mask::from_elem((20, 20), false);
        for r in 5..15 {
            for c in 2..18 {
                m[[r, c]] = r != 9;
            }
        }
        m[[0, 0]] = true;
        let closed = close(&m, 3, 9);
        assert!((2..18).all(|c| closed[[9, c]]));
        let opened = open(&closed, 3, 3);
        assert!(!opened[[0, 0]]);
        assert!(opened[[10, 10]]);
    }

    #[test]
    fn components() {
        let mut m = Mask::from_elem((10, 10), false);
        m[[1, 1]] = true;
        m[[2, 2]] = true; // diagonal neighbour joins
        m[[7, 7]] = true;
        let (_, sizes) = label_components(&m);
        assert_eq!(sizes, vec![2, 1]);
        let kept = remove_small_components(&m, 2);
        assert!(kept[[1, 1]] && kept[[2, 2]] && !kept[[7, 7]]);
    }
}
