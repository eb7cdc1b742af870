//! Minimal reverse-mode automatic differentiation in `f64`.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles and
//! replays them backwards in [`Graph::backward`]. Graphs are single-use:
//! build one per training step.

mod graph;
pub mod ops;
mod params;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Var};
pub use params::{Adam, Bound, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central differences of `f` at `x` against the tape gradient.
    fn check(x: Tensor, f: impl for<'g> Fn(Var<'g>) -> Var<'g>, tol: f64) {
        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let loss = f(xv);
        let grad = g.backward(loss).wrt(xv);
        let eps = 1e-6;
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let g = Graph::new();
                f(g.constant(xp)).item()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let an = grad.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
            assert!(err < tol, "index {i}: analytic {an} vs numeric {fd}");
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let x = random(&[2, 2, 5, 4], &mut rng);
        let (w2, b2) = (w.clone(), b.clone());
        check(
            x.clone(),
            move |x| {
                let g = x.graph();
                x.conv2d(g.constant(w2.clone()), Some(g.constant(b2.clone())), 2, 1).square().sum()
            },
            1e-6,
        );
        check(
            w,
            move |w| {
                let g = w.graph();
                g.constant(x.clone()).conv2d(w, Some(g.constant(b.clone())), 1, 1).square().sum()
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_and_reductions_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(&[4, 3], &mut rng);
        check(
            random(&[2, 4], &mut rng),
            move |a| a.matmul(a.graph().constant(b.clone())).sigmoid().sum_axis(0).square().sum(),
            1e-6,
        );
        check(random(&[2, 3, 2], &mut rng), |x| x.mean_axis(1).expand(&[2, 3, 2]).mul(x).sum(), 1e-6);
    }

    #[test]
    fn bilinear_gradients_wrt_image_and_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random(&[2, 4, 5], &mut rng);
        let xs = Tensor::new(&[3], vec![1.3, 2.7, 0.4]);
        let ys = Tensor::new(&[3], vec![0.6, 2.2, 1.9]);
        let (xs2, ys2) = (xs.clone(), ys.clone());
        check(
            img.clone(),
            move |i| {
                let g = i.graph();
                i.bilinear_sample(g.constant(xs2.clone()), g.constant(ys2.clone())).square().sum()
            },
            1e-6,
        );
        let (img2, ys3) = (img.clone(), ys.clone());
        check(
            xs.clone(),
            move |x| {
                let g = x.graph();
                g.constant(img2.clone()).bilinear_sample(x, g.constant(ys3.clone())).square().sum()
            },
            1e-5,
        );
        check(
            ys,
            move |y| {
                let g = y.graph();
                g.constant(img.clone()).bilinear_sample(g.constant(xs.clone()), y).square().sum()
            },
            1e-5,
        );
    }

    #[test]
    fn bilinear_on_grid_is_exact() {
        let g = Graph::new();
        let img = g.constant(Tensor::new(&[1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]));
        let xs = g.constant(Tensor::new(&[4], vec![0.0, 1.0, 1e-12, 1.0 - 1e-12]));
        let ys = g.constant(Tensor::new(&[4], vec![0.0, 1.0, 1.0, 0.0]));
        let out = img.bilinear_sample(xs, ys).value();
        assert_eq!(out.data(), &[0.1, 0.4, 0.3, 0.2]);
    }

    #[test]
    fn concat_and_narrow_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let other = random(&[2, 1, 3], &mut rng);
        check(
            random(&[2, 2, 3], &mut rng),
            move |x| {
                let c = Var::concat(&[x, x.graph().constant(other.clone())], 1);
                c.narrow(1, 1, 2).square().sum()
            },
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(
            random(&[1, 4, 2, 2], &mut rng),
            |x| {
                let g = x.graph();
                let gamma = g.constant(Tensor::new(&[4], vec![1.0, 0.5, -0.3, 2.0]));
                let beta = g.constant(Tensor::zeros(&[4]));
                ops::layer_norm_channels(x, gamma, beta, 1e-5).sin_like().sum()
            },
            1e-5,
        );
    }

    trait SinLike<'g> {
        fn sin_like(self) -> Var<'g>;
    }

    impl<'g> SinLike<'g> for Var<'g> {
        fn sin_like(self) -> Var<'g> {
            self.map(f64::sin, |x, _| x.cos())
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new();
        for _ in 0..500 {
            let g = Graph::new();
            let bound = params.bind(&g, |_| true);
            let loss = bound.get("w").square().sum();
            let grads = g.backward(loss);
            opt.step(&mut params, &bound, &grads, 0.05);
        }
        assert!(params.get("w").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }
}
