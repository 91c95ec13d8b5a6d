use super::FlowField;
use crate::graph::{Graph, Var};

/// Anisotropic total variation of a `[C, H, W]` array. Neighbour terms past
/// the last row or column are omitted.
pub fn tv_sum(data: &[f64], channels: usize, h: usize, w: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..channels {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let f = plane[i * w + j];
                let down = if i + 1 < h { (f - plane[(i + 1) * w + j]).abs() } else { 0.0 };
                let right = if j + 1 < w { (f - plane[i * w + j + 1]).abs() } else { 0.0 };
                acc += down + right;
            }
        }
    }
    acc
}

pub fn tv_loss(flow: &FlowField) -> f64 {
    tv_sum(flow.tensor().data(), 2, flow.height(), flow.width())
}

/// Differentiable TV of a `[C, H, W]` node; subgradient 0 at exact ties.
pub fn tv_loss_graph(g: &mut Graph, flow: Var) -> Var {
    let s = g.shape(flow).to_vec();
    assert_eq!(s.len(), 3, "tv_loss_graph expects [C, H, W]");
    let (c, h, w) = (s[0], s[1], s[2]);
    // Differences against row/column neighbours via shifted stencils; the
    // replicated border makes the omitted terms exactly zero.
    let down = g.stencil(flow, &[0., 0., 0., 0., -1., 0., 0., 1., 0.], 3);
    let right = g.stencil(flow, &[0., 0., 0., 0., -1., 1., 0., 0., 0.], 3);
    let ad = g.abs(down);
    let ar = g.abs(right);
    let per_pixel = g.add(ad, ar);
    let total = g.sum(per_pixel);
    debug_assert_eq!(g.value(per_pixel).len(), c * h * w);
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn brute(u: &[f64], v: &[f64], h: usize, w: usize) -> f64 {
        let mut total = 0.0;
        for ch in [u, v] {
            for i in 0..h {
                for j in 0..w {
                    let mut term = 0.0;
                    if i + 1 < h {
                        term += (ch[i * w + j] - ch[(i + 1) * w + j]).abs();
                    } else {
                        term += 0.0;
                    }
                    if j + 1 < w {
                        term += (ch[i * w + j] - ch[i * w + j + 1]).abs();
                    } else {
                        term += 0.0;
                    }
                    total += term;
                }
            }
        }
        total
    }

    #[test]
    fn constant_field_has_zero_tv() {
        assert_eq!(tv_loss(&FlowField::uniform(5, 7, 3.25, -1.5)), 0.0);
    }

    #[test]
    fn two_by_two_hand_example() {
        let f = FlowField::from_uv(2, 2, vec![0., 1., 0., 1.], vec![0.; 4]).unwrap();
        assert_eq!(tv_loss(&f), 2.0);
    }

    #[test]
    fn graph_version_matches_and_has_zero_tie_gradient() {
        let f = FlowField::from_uv(2, 2, vec![0., 1., 0., 1.], vec![0.; 4]).unwrap();
        let mut g = Graph::new();
        let x = g.param(f.tensor().clone());
        let l = tv_loss_graph(&mut g, x);
        assert_eq!(g.value(l).item(), 2.0);
        let grads = g.backward(l);
        // u: horizontal differences -1 at column 0 pulls toward +1 etc; v all ties.
        assert_eq!(grads.get(x).data(), &[-1., 1., -1., 1., 0., 0., 0., 0.]);
    }

    proptest! {
        #[test]
        fn matches_brute_force_exactly(vals in proptest::collection::vec(-5.0f64..5.0, 2 * 8 * 8)) {
            let (u, v) = vals.split_at(64);
            let f = FlowField::from_uv(8, 8, u.to_vec(), v.to_vec()).unwrap();
            prop_assert_eq!(tv_loss(&f), brute(u, v, 8, 8));
        }

        #[test]
        fn nonnegative_and_zero_iff_constant(vals in proptest::collection::vec(-2.0f64..2.0, 2 * 4 * 5)) {
            let f = FlowField::new(Tensor::new(&[2, 4, 5], vals.clone()).unwrap()).unwrap();
            let tv = tv_loss(&f);
            prop_assert!(tv >= 0.0);
            let constant = vals[..20].iter().all(|&x| x == vals[0]) && vals[20..].iter().all(|&x| x == vals[20]);
            prop_assert_eq!(tv == 0.0, constant);
        }
    }
}
