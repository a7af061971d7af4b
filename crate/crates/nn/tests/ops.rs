use crfnet_nn::check::{central_difference, relative_error};
use crfnet_nn::{Graph, NnError, NodeId, Padding, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    t(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn pointwise_identity_kernel_returns_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 3, 4, 5], &mut rng);
    let mut w = vec![0.0; 9];
    for c in 0..3 {
        w[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let xi = g.input(x.clone()).unwrap();
    let wi = g.input(t(&[3, 3, 1, 1], w)).unwrap();
    let bi = g.input(t(&[3], vec![0.0; 3])).unwrap();
    let y = g.conv2d(xi, wi, Some(bi), 1, Padding::Valid).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn ones_kernel_spreads_one_hot_pixel() {
    let mut x = vec![0.0; 25];
    x[2 * 5 + 2] = 1.0;
    let mut g = Graph::new();
    let xi = g.input(t(&[1, 1, 5, 5], x)).unwrap();
    let wi = g.input(t(&[1, 1, 3, 3], vec![1.0; 9])).unwrap();
    let y = g.conv2d(xi, wi, None, 1, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 5, 5]);
    let v = g.value(y).data();
    for yy in 0..5 {
        for xx in 0..5 {
            let inside = (1..=3).contains(&yy) && (1..=3).contains(&xx);
            assert_eq!(v[yy * 5 + xx], if inside { 1.0 } else { 0.0 }, "({yy},{xx})");
        }
    }
}

#[test]
fn conv_output_size_formula() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[2, 3, 9, 12])).unwrap();
    let w = g.input(Tensor::zeros(&[4, 3, 3, 3])).unwrap();
    let y = g.conv2d(x, w, None, 2, Padding::Same).unwrap();
    // floor((9 + 2 - 3) / 2) + 1 = 5, floor((12 + 2 - 3) / 2) + 1 = 6
    assert_eq!(g.shape(y), &[2, 4, 5, 6]);
    let y = g.conv2d(x, w, None, 1, Padding::Valid).unwrap();
    assert_eq!(g.shape(y), &[2, 4, 7, 10]);
}

#[test]
fn conv_channel_mismatch_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 3, 4, 4])).unwrap();
    let w = g.input(Tensor::zeros(&[2, 4, 3, 3])).unwrap();
    assert!(matches!(
        g.conv2d(x, w, None, 1, Padding::Same),
        Err(NnError::ChannelMismatch { .. })
    ));
}

#[test]
fn maxpool_examples() {
    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor::full(&[1, 2, 4, 6], 3.5)).unwrap();
    let p = g.maxpool2d(c).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 3.5));
    assert_eq!(g.shape(p), &[1, 2, 2, 3]);

    let b = g.input(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
    let p = g.maxpool2d(b).unwrap();
    assert_eq!(g.value(p).data(), &[4.0]);
}

#[test]
fn maxpool_ceil_policy_and_radar_stage_three() {
    let mut g = Graph::<f32>::new();
    let mut x = g.input(Tensor::zeros(&[1, 1, 360, 640])).unwrap();
    for _ in 0..3 {
        x = g.maxpool2d(x).unwrap();
    }
    assert_eq!(g.shape(x), &[1, 1, 45, 80]);
    let odd = g.input(Tensor::full(&[1, 1, 5, 3], -2.0)).unwrap();
    let p = g.maxpool2d(odd).unwrap();
    assert_eq!(g.shape(p), &[1, 1, 3, 2]);
    assert!(g.value(p).data().iter().all(|&v| v == -2.0));
}

#[test]
fn maxpool_routes_gradient_to_first_maximum() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", t(&[1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0])).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, id).unwrap();
    let p = g.maxpool2d(x).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn concat_examples() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = store.add("a", random(&[2, 3, 2, 2], &mut rng)).unwrap();
    let b = store.add("b", random(&[2, 2, 2, 2], &mut rng)).unwrap();
    let mut g = Graph::new();
    let (an, bn) = (g.param(&store, a).unwrap(), g.param(&store, b).unwrap());
    let c = g.concat_channels(an, bn).unwrap();
    assert_eq!(g.shape(c), &[2, 5, 2, 2]);
    // second batch item: channels 0..3 from a, 3..5 from b
    assert_eq!(g.value(c).data()[20..32], g.value(an).data()[12..24]);
    assert_eq!(g.value(c).data()[32..40], g.value(bn).data()[8..16]);

    let s = g.sum(c).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(an).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(grads.get(bn).unwrap().data().iter().all(|&v| v == 1.0));

    let empty = g.input(Tensor::zeros(&[2, 0, 2, 2])).unwrap();
    let same = g.concat_channels(an, empty).unwrap();
    assert_eq!(g.value(same), g.value(an));

    let other = g.input(Tensor::zeros(&[2, 1, 3, 2])).unwrap();
    assert!(matches!(g.concat_channels(an, other), Err(NnError::ShapeMismatch { .. })));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 1, 1, 3], vec![-1.0, 2.0, 0.0])).unwrap();
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = g.sigmoid(x).unwrap();
    assert_eq!(g.value(s).data()[2], 0.5);

    let u = g.input(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
    let up = g.upsample_nearest2x(u).unwrap();
    assert_eq!(
        g.value(up).data(),
        &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
    );
    let cropped = g.upsample_nearest_to(u, 3, 4).unwrap();
    assert_eq!(g.shape(cropped), &[1, 1, 3, 4]);

    let a = g.input(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    let b = g.input(Tensor::zeros(&[1, 1, 2, 3])).unwrap();
    assert!(matches!(g.add(a, b), Err(NnError::ShapeMismatch { .. })));
}

#[test]
fn relu_gradient_is_zero_at_the_kink() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", t(&[1, 1, 1, 3], vec![-1.0, 0.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let x = g.param(&store, id).unwrap();
    let r = g.relu(x).unwrap();
    let s = g.sum(r).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn backward_linear_and_accumulation_rules() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(&[1, 1, 1, 3], vec![0.5, -1.0, 2.0])).unwrap();
    let xv = t(&[1, 1, 1, 3], vec![3.0, 4.0, -5.0]);
    let mut g = Graph::new();
    let wn = g.param(&store, w).unwrap();
    let xn = g.input(xv.clone()).unwrap();
    let prod = g.mul(wn, xn).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(wn).unwrap(), &xv);

    // the same parameter used twice: d/dw sum(w + w) = 2
    let mut g = Graph::new();
    let a = g.param(&store, w).unwrap();
    let b = g.param(&store, w).unwrap();
    let s = g.add(a, b).unwrap();
    let s2 = g.add(s, a).unwrap();
    let loss = g.sum(s2).unwrap();
    let grads = g.backward(loss).unwrap();
    store.accumulate(&grads);
    assert_eq!(store.get(w).grad.data(), &[3.0, 3.0, 3.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
    let r = g.relu(x).unwrap();
    assert!(matches!(g.backward(r), Err(NnError::NonScalarLoss(_))));
}

#[test]
fn inference_graph_refuses_backward() {
    let mut g = Graph::<f64>::inference();
    let x = g.input(Tensor::zeros(&[1])).unwrap();
    let s = g.sum(x).unwrap();
    assert!(g.backward(s).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[1, 1, 1, 2], vec![1e308, 1e308])).unwrap();
    assert!(matches!(g.add(x, x), Err(NnError::NonFinite { op: "add" })));
}

/// Builds `sum(op(params) ⊙ probe)` so every output element carries a
/// distinct weight in the gradient.
struct Harness {
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
    probe_seed: u64,
}

impl Harness {
    fn new(tensors: Vec<Tensor<f64>>) -> Self {
        let mut store = ParamStore::new();
        let ids = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("p{i}"), t).unwrap())
            .collect();
        Harness {
            store,
            ids,
            probe_seed: 99,
        }
    }

    fn loss<F>(&self, store: &ParamStore<f64>, build: &F, g: &mut Graph<f64>) -> (NodeId, Vec<NodeId>)
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let nodes: Vec<NodeId> = self.ids.iter().map(|&id| g.param(store, id).unwrap()).collect();
        let out = build(g, &nodes);
        let mut rng = ChaCha8Rng::seed_from_u64(self.probe_seed);
        let probe = random(g.shape(out), &mut rng);
        let pn = g.input(probe).unwrap();
        let m = g.mul(out, pn).unwrap();
        (g.sum(m).unwrap(), nodes)
    }

    /// Max relative error of every parameter coordinate against central
    /// differences with h = 1e-5.
    fn max_error<F>(&self, build: F) -> f64
    where
        F: Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let (loss, nodes) = self.loss(&self.store, &build, &mut g);
        let grads = g.backward(loss).unwrap();
        let mut worst: f64 = 0.0;
        for (k, &id) in self.ids.iter().enumerate() {
            let analytic = grads.get(nodes[k]).map(|t| t.data().to_vec()).unwrap_or_default();
            let x = self.store.get(id).value.data().to_vec();
            let coords: Vec<usize> = (0..x.len()).collect();
            let numeric = central_difference(&x, &coords, 1e-5, |probe| {
                let mut store = self.store.clone();
                store.get_mut(id).value.data_mut().copy_from_slice(probe);
                let mut g = Graph::new();
                let (loss, _) = self.loss(&store, &build, &mut g);
                g.value(loss).data()[0]
            });
            for (i, n) in numeric.iter().enumerate() {
                let a = analytic.get(i).copied().unwrap_or(0.0);
                worst = worst.max(relative_error(a, *n, 1e-6));
            }
        }
        worst
    }
}

const OP_TOLERANCE: f64 = 1e-4;

#[test]
fn gradient_check_conv2d_all_configurations() {
    for seed in 0..3 {
        for &(k, stride, padding) in &[
            (3, 1, Padding::Same),
            (3, 2, Padding::Same),
            (1, 1, Padding::Valid),
            (3, 1, Padding::Valid),
            (1, 2, Padding::Valid),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = Harness::new(vec![
                random(&[2, 2, 4, 3], &mut rng),
                random(&[3, 2, k, k], &mut rng),
                random(&[3], &mut rng),
            ]);
            let err = h.max_error(|g, p| g.conv2d(p[0], p[1], Some(p[2]), stride, padding).unwrap());
            assert!(err < OP_TOLERANCE, "k={k} s={stride} {padding:?}: {err}");
        }
    }
}

#[test]
fn gradient_check_pool_concat_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = Harness::new(vec![random(&[1, 2, 3, 4], &mut rng)]);
    assert!(h.max_error(|g, p| g.maxpool2d(p[0]).unwrap()) < OP_TOLERANCE);

    let h = Harness::new(vec![random(&[2, 2, 3, 3], &mut rng), random(&[2, 1, 3, 3], &mut rng)]);
    assert!(h.max_error(|g, p| g.concat_channels(p[0], p[1]).unwrap()) < OP_TOLERANCE);

    let h = Harness::new(vec![random(&[1, 2, 2, 3], &mut rng)]);
    assert!(h.max_error(|g, p| g.upsample_nearest2x(p[0]).unwrap()) < OP_TOLERANCE);
    assert!(h.max_error(|g, p| g.upsample_nearest_to(p[0], 3, 5).unwrap()) < OP_TOLERANCE);
}

#[test]
fn gradient_check_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = Harness::new(vec![random(&[1, 2, 3, 3], &mut rng), random(&[1, 2, 3, 3], &mut rng)]);
    assert!(h.max_error(|g, p| g.relu(p[0]).unwrap()) < OP_TOLERANCE);
    assert!(h.max_error(|g, p| g.sigmoid(p[0]).unwrap()) < OP_TOLERANCE);
    assert!(h.max_error(|g, p| g.add(p[0], p[1]).unwrap()) < OP_TOLERANCE);
    assert!(h.max_error(|g, p| g.mul(p[0], p[1]).unwrap()) < OP_TOLERANCE);
    assert!(h.max_error(|g, p| g.scale_channels(p[0], &[0.5, -3.0]).unwrap()) < OP_TOLERANCE);
}

#[test]
fn gradient_check_composite_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = Harness::new(vec![
        random(&[1, 2, 4, 4], &mut rng),
        random(&[3, 2, 3, 3], &mut rng),
        random(&[3], &mut rng),
        random(&[2, 5, 1, 1], &mut rng),
    ]);
    let err = h.max_error(|g, p| {
        let c = g.conv2d(p[0], p[1], Some(p[2]), 1, Padding::Same).unwrap();
        let r = g.relu(c).unwrap();
        let m = g.maxpool2d(r).unwrap();
        let pooled_in = g.maxpool2d(p[0]).unwrap();
        let cat = g.concat_channels(m, pooled_in).unwrap();
        let pw = g.conv2d(cat, p[3], None, 1, Padding::Valid).unwrap();
        let up = g.upsample_nearest2x(pw).unwrap();
        g.sigmoid(up).unwrap()
    });
    assert!(err < OP_TOLERANCE, "{err}");
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::<f32>::new();
        let w = store.add("w", Tensor::from_vec(&[8, 3, 3, 3], (0..216).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap();
        let x: Tensor<f32> = Tensor::from_vec(&[1, 3, 16, 16], (0..768).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new();
        let wn = g.param(&store, w).unwrap();
        let xn = g.input(x).unwrap();
        let c = g.conv2d(xn, wn, None, 1, Padding::Same).unwrap();
        let r = g.relu(c).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(c).clone(), grads.get(wn).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
