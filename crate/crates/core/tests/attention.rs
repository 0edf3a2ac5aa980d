use dlka::gradcheck::{gradcheck_layer, GradCheckConfig};
use dlka::lka::{receptive_support, stacked_support, DlkaBlock2d, DlkaBlock3d, LkaAttention, LkaSpec};
use dlka::nn::{ParamStore, Session};
use dlka::tensor::{elementwise, BinaryOp};
use dlka::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn init_attn(spec: LkaSpec, seed: u64) -> (LkaAttention, ParamStore) {
    let a = LkaAttention::new("attn", spec);
    let mut st = ParamStore::new();
    a.init(&mut st, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (a, st)
}

/// Fill every parameter with random values. Offset networks get small
/// weights and a bias of 0.25 so sampling points stay off the integer grid.
fn randomize(st: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in st.iter_mut() {
        let shape = t.shape().to_vec();
        *t = if name.contains(".offset.w") {
            Tensor::uniform(&shape, -0.003, 0.003, &mut rng)
        } else if name.contains(".offset.b") {
            Tensor::full(&shape, 0.25)
        } else {
            Tensor::uniform(&shape, -0.5, 0.5, &mut rng)
        };
    }
}

fn run(st: &ParamStore, x: &Tensor, f: impl Fn(&mut Session, Var) -> dlka::Result<Var>) -> Tensor {
    let mut s = Session::inference(st);
    let v = s.input(x.clone());
    let y = f(&mut s, v).unwrap();
    s.value(y).clone()
}

#[test]
fn zero_output_projection_returns_input() {
    for rank in [2, 3] {
        let (a, st) = init_attn(LkaSpec::new(rank, 4, 7, 2), 1);
        let mut st2 = st.clone();
        randomize(&mut st2, 2);
        let z = Tensor::zeros(st2.get("attn.proj_out.w").unwrap().shape());
        st2.set("attn.proj_out.w", z).unwrap();
        let shape: Vec<usize> = if rank == 2 { vec![2, 4, 6, 5] } else { vec![1, 4, 4, 5, 3] };
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let y = run(&st2, &x, |s, v| a.forward(s, v));
        assert_eq!(y, x);
    }
}

#[test]
fn zero_offsets_match_rigid_module() {
    for rank in [2, 3] {
        let spec = LkaSpec::new(rank, 3, 7, 2);
        let (deform, mut st) = init_attn(spec.clone(), 4);
        // Randomize everything except the (zero) offset networks.
        let saved: Vec<(String, Tensor)> = st
            .iter()
            .filter(|(n, _)| n.contains(".offset."))
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        randomize(&mut st, 5);
        for (n, t) in saved {
            st.set(&n, t).unwrap();
        }
        let rigid = LkaAttention::new("attn", spec.rigid());
        let shape: Vec<usize> = if rank == 2 { vec![1, 3, 7, 6] } else { vec![1, 3, 4, 4, 5] };
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let yd = run(&st, &x, |s, v| deform.forward(s, v));
        let yr = run(&st, &x, |s, v| rigid.forward(s, v));
        assert!(yd.max_abs_diff(&yr).unwrap() < 1e-12);
    }
}

#[test]
fn gating_is_quadratic_without_activations_or_normalization() {
    for rank in [2, 3] {
        let (a, mut st) = init_attn(LkaSpec::new(rank, 3, 5, 2).rigid(), 7);
        randomize(&mut st, 8);
        let bias_names: Vec<String> = st.names().filter(|n| n.ends_with(".b")).map(str::to_string).collect();
        for n in bias_names {
            let z = Tensor::zeros(st.get(&n).unwrap().shape());
            st.set(&n, z).unwrap();
        }
        let shape: Vec<usize> = if rank == 2 { vec![1, 3, 6, 6] } else { vec![1, 3, 4, 4, 4] };
        let x = Tensor::uniform(&shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let delta = |x: &Tensor| {
            let mut s = Session::inference(&st).with_linear_activations();
            let v = s.input(x.clone());
            let y = a.forward(&mut s, v).unwrap();
            elementwise(s.value(y), x, BinaryOp::Sub).unwrap()
        };
        let base = delta(&x);
        for alpha in [0.5, 2.0, -3.0] {
            let scaled = delta(&x.scale(alpha));
            let expect = base.scale(alpha * alpha);
            let tol = 1e-12 * (1.0 + expect.max_abs());
            assert!(scaled.max_abs_diff(&expect).unwrap() < tol, "alpha {alpha}");
        }
    }
}

/// Per-axis extent of the nonzero gradient of one central output of the
/// depthwise pair with respect to the input.
fn measured_support(spec: &LkaSpec) -> Vec<usize> {
    let (a, mut st) = init_attn(spec.clone(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (_, t) in st.iter_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::uniform(&shape, 0.5, 1.5, &mut rng);
    }
    let n = 41;
    let shape: Vec<usize> = [vec![1, spec.channels], vec![n; spec.rank]].concat();
    let mut s = Session::inference(&st);
    let x = s.graph.param(Tensor::uniform(&shape, 0.5, 1.5, &mut rng));
    let h = a.dw.forward(&mut s, x).unwrap();
    let h = a.dwd.forward(&mut s, h).unwrap();
    let mask = Tensor::from_fn(&shape, |i| if i[1] == 0 && i[2..].iter().all(|&v| v == n / 2) { 1.0 } else { 0.0 });
    let m = s.input(mask);
    let p = s.graph.mul(h, m).unwrap();
    let l = s.graph.sum(p);
    let g = s.graph.backward(l).unwrap();
    let gx = g.get(x).unwrap();
    (0..spec.rank)
        .map(|ax| {
            let mut lo = usize::MAX;
            let mut hi = 0;
            let mut idx = vec![0usize; shape.len()];
            for &v in gx.data() {
                if v != 0.0 {
                    lo = lo.min(idx[2 + ax]);
                    hi = hi.max(idx[2 + ax]);
                }
                for k in (0..shape.len()).rev() {
                    idx[k] += 1;
                    if idx[k] < shape[k] {
                        break;
                    }
                    idx[k] = 0;
                }
            }
            hi - lo + 1
        })
        .collect()
}

#[test]
fn receptive_support_matches_gradient_support() {
    for (k, d, expect) in [(7, 2, 9), (13, 3, 17), (21, 3, 23), (1, 1, 1)] {
        assert_eq!(receptive_support(k, d), expect);
        let m = measured_support(&LkaSpec::new(2, 1, k, d).rigid());
        assert_eq!(m, vec![expect; 2], "K={k} d={d}");
    }
    let m = measured_support(&LkaSpec::new(3, 1, 7, 2).rigid());
    assert_eq!(m, vec![9; 3]);
}

#[test]
fn stacked_pairs_compose() {
    // Two depthwise pairs in sequence cover 2 * S - 1 taps.
    let spec = LkaSpec::new(2, 1, 7, 2).rigid();
    let (a, mut st) = init_attn(spec.clone(), 12);
    for (_, t) in st.iter_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::full(&shape, 1.0);
    }
    let mut s = Session::inference(&st);
    let x = s.graph.param(Tensor::full(&[1, 1, 41, 41], 1.0));
    let mut h = x;
    for _ in 0..2 {
        h = a.dw.forward(&mut s, h).unwrap();
        h = a.dwd.forward(&mut s, h).unwrap();
    }
    let mask = Tensor::from_fn(&[1, 1, 41, 41], |i| if i[2] == 20 && i[3] == 20 { 1.0 } else { 0.0 });
    let m = s.input(mask);
    let p = s.graph.mul(h, m).unwrap();
    let l = s.graph.sum(p);
    let g = s.graph.backward(l).unwrap();
    let gx = g.get(x).unwrap();
    let cols = (0..41).filter(|&j| gx.at(&[0, 0, 20, j]) != 0.0).count();
    assert_eq!(cols, stacked_support(9, 2));
    assert_eq!(cols, 17);
}

#[test]
fn fresh_blocks_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let b2 = DlkaBlock2d::new("b", LkaSpec::new(2, 4, 7, 2), 4);
    let mut st = ParamStore::new();
    b2.init(&mut st, &mut rng).unwrap();
    let x = Tensor::uniform(&[2, 4, 6, 6], -1.0, 1.0, &mut rng);
    assert_eq!(run(&st, &x, |s, v| b2.forward(s, v)), x);

    let b3 = DlkaBlock3d::new("b", LkaSpec::new(3, 4, 7, 2));
    let mut st = ParamStore::new();
    b3.init(&mut st, &mut rng).unwrap();
    let x = Tensor::uniform(&[1, 4, 4, 4, 4], -1.0, 1.0, &mut rng);
    assert_eq!(run(&st, &x, |s, v| b3.forward(s, v)), x);
}

#[test]
fn block_param_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let b = DlkaBlock3d::new("b", LkaSpec::new(3, 8, 21, 3));
    let mut st = ParamStore::new();
    b.init(&mut st, &mut rng).unwrap();
    let c = 8;
    // DW 5^3, DW-D 7^3 with biases, pointwise attention conv with bias.
    assert_eq!(b.attn.decomposition_params(), c * (125 + 343 + 3 + c));
    assert_eq!(st.count_prefix("b.attn.volume.offset"), c * 81 * 27 + 81);
    assert_eq!(b.attn.offset_params(), c * 81 * 27 + 81);
    let rigid = LkaAttention::new("r", LkaSpec::new(3, 8, 21, 3).rigid());
    assert_eq!(rigid.offset_params(), 0);
}

#[cfg(not(feature = "f32"))]
mod gradients {
    use super::*;

    fn cfg() -> GradCheckConfig {
        GradCheckConfig::fine()
    }

    #[test]
    fn attention_2d_deformable() {
        for seed in 0..5u64 {
            let (a, mut st) = init_attn(LkaSpec::new(2, 2, 5, 2), seed);
            randomize(&mut st, 100 + seed);
            let x = Tensor::uniform(&[1, 2, 5, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(200 + seed));
            let rep = gradcheck_layer("lka2d", &st, &x, &|s, v| a.forward(s, v), seed, &cfg()).unwrap();
            assert!(rep.passed(), "{rep}");
        }
    }

    #[test]
    fn attention_3d_deformable() {
        for seed in 0..5u64 {
            let (a, mut st) = init_attn(LkaSpec::new(3, 2, 3, 1), seed);
            randomize(&mut st, 100 + seed);
            let x = Tensor::uniform(&[1, 2, 3, 4, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(200 + seed));
            let rep = gradcheck_layer("lka3d", &st, &x, &|s, v| a.forward(s, v), seed, &cfg()).unwrap();
            assert!(rep.passed(), "{rep}");
        }
    }
}
