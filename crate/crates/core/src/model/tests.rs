use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::grad_check;

fn cfg(depth: usize, base: usize, attention: bool) -> ModelConfig {
    ModelConfig {
        depth,
        base_channels: base,
        attention,
        init_seed: 42,
        ..ModelConfig::default()
    }
}

fn input(n: usize, size: usize, seed: u64) -> Tensor {
    Tensor::uniform(vec![n, 1, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn bits(t: &[f64]) -> Vec<u64> {
    t.iter().map(|v| v.to_bits()).collect()
}

/// Layer-by-layer parameter count, written independently of the builder.
fn count_oracle(depth: usize, base: usize, cin: usize, cout: usize, attention: bool) -> usize {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let mut total = 0;
    let mut prev = cin;
    for l in 0..=depth {
        let c = base << l;
        total += conv(prev, c, 3) + conv(c, c, 3);
        prev = c;
    }
    for l in 0..depth {
        let (c, below) = (base << l, base << (l + 1));
        if attention {
            let inter = (below / 2).max(1);
            total += conv(c, inter, 2) + conv(below, inter, 1) + conv(inter, 1, 1);
        }
        total += conv(below, c, 3) + conv(2 * c, c, 3) + conv(c, c, 3);
    }
    total + conv(base, cout, 1)
}

#[test]
fn parameter_count_matches_layer_sum() {
    // frozen from the per-layer formula above
    assert_eq!(count_oracle(3, 16, 1, 1, true), 568_100);
    let m = AttentionUNet::build(ModelConfig::default()).unwrap();
    assert_eq!(m.parameter_count(), 568_100);
    for (d, b, att) in [(1, 1, true), (2, 3, false), (2, 4, true)] {
        let m = AttentionUNet::build(cfg(d, b, att)).unwrap();
        assert_eq!(m.parameter_count(), count_oracle(d, b, 1, 1, att));
    }
}

#[test]
fn equal_configs_build_identical_parameters() {
    let a = AttentionUNet::build(cfg(2, 4, true)).unwrap();
    let b = AttentionUNet::build(cfg(2, 4, true)).unwrap();
    assert_eq!(bits(&a.get_weights()), bits(&b.get_weights()));
    assert!(a.parameters().names().eq(b.parameters().names()));
    let c = AttentionUNet::build(ModelConfig { init_seed: 43, ..cfg(2, 4, true) }).unwrap();
    assert_ne!(bits(&a.get_weights()), bits(&c.get_weights()));
}

#[test]
fn names_are_unique_and_ordered() {
    let m = AttentionUNet::build(cfg(2, 2, true)).unwrap();
    let names: Vec<&str> = m.parameters().names().collect();
    assert_eq!(names.first(), Some(&"enc0.conv1.weight"));
    assert_eq!(names.last(), Some(&"head.bias"));
    assert!(names.contains(&"dec1.gate.psi.bias"));
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [cfg(0, 4, true), cfg(2, 0, true)] {
        assert!(matches!(AttentionUNet::build(bad), Err(Error::Config { .. })));
    }
}

#[test]
fn smallest_network_runs() {
    let m = AttentionUNet::build(cfg(1, 1, true)).unwrap();
    let out = m.forward(&input(1, 4, 1)).unwrap();
    assert_eq!(out.shape(), &[1, 1, 4, 4]);
}

#[test]
fn forward_shape_range_and_determinism() {
    let m = AttentionUNet::build(cfg(2, 4, true)).unwrap();
    let x = input(2, 16, 2);
    let a = m.forward(&x).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert!(a.data().iter().all(|&p| p > 0.0 && p < 1.0));
    let b = m.forward(&x).unwrap();
    assert_eq!(bits(a.data()), bits(b.data()));
}

#[test]
fn forward_rejects_indivisible_extent() {
    let m = AttentionUNet::build(cfg(2, 2, true)).unwrap();
    assert!(matches!(m.forward(&input(1, 6, 3)), Err(Error::Shape { .. })));
    let two_channel = Tensor::zeros(vec![1, 2, 8, 8]);
    assert!(m.forward(&two_channel).is_err());
}

fn set_psi_bias(m: &mut AttentionUNet, value: f64) {
    for level in 0..m.config().depth {
        let name = format!("dec{level}.gate.psi.bias");
        m.parameters_mut().get_mut(&name).unwrap().data_mut().fill(value);
    }
}

#[test]
fn saturated_gates_match_plain_unet() {
    let mut att = AttentionUNet::build(cfg(3, 4, true)).unwrap();
    set_psi_bias(&mut att, 1e3);
    let mut plain = AttentionUNet::build(cfg(3, 4, false)).unwrap();
    let shared: Vec<(String, Tensor)> = plain
        .parameters()
        .names()
        .map(|n| (n.to_string(), att.parameters().get(n).unwrap().clone()))
        .collect();
    plain.load_parameters(ParameterSet::new(shared).unwrap()).unwrap();
    let x = input(2, 16, 4);
    let diff = att.forward(&x).unwrap().max_abs_diff(&plain.forward(&x).unwrap());
    assert!(diff <= 1e-6, "{diff}");
}

fn gate_inputs(m: &AttentionUNet, seed: u64) -> (Tensor, Tensor) {
    let c = m.config().channels_at(0);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (
        Tensor::uniform(vec![2, c, 8, 8], -0.5, 0.5, &mut r),
        Tensor::uniform(vec![2, 2 * c, 4, 4], -0.5, 0.5, &mut r),
    )
}

fn run_gate(m: &AttentionUNet, x: &Tensor, gt: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let params = m.bind(&mut g, false);
    let (xv, gv) = (g.constant(x.clone()), g.constant(gt.clone()));
    let (gated, coeff) = m.gate(0).unwrap().apply(&mut g, &params, xv, gv).unwrap();
    (g.value(gated).clone(), g.value(coeff).clone())
}

#[test]
fn gate_extremes() {
    let mut m = AttentionUNet::build(cfg(1, 4, true)).unwrap();
    let (x, gt) = gate_inputs(&m, 5);
    set_psi_bias(&mut m, -1e3);
    let (gated, _) = run_gate(&m, &x, &gt);
    assert!(gated.data().iter().all(|v| v.abs() < 1e-12));
    set_psi_bias(&mut m, 1e3);
    let (gated, coeff) = run_gate(&m, &x, &gt);
    assert!(gated.max_abs_diff(&x) < 1e-12);
    assert!(coeff.data().iter().all(|&c| c > 0.0 && c < 1.0));
}

#[test]
fn gate_rejects_wrong_resolution() {
    let m = AttentionUNet::build(cfg(1, 2, true)).unwrap();
    let mut g = Graph::new();
    let params = m.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(vec![1, 2, 8, 8]));
    let gt = g.constant(Tensor::zeros(vec![1, 4, 8, 8]));
    assert!(matches!(m.gate(0).unwrap().apply(&mut g, &params, x, gt), Err(Error::Shape { .. })));
}

#[test]
fn gate_matches_primitive_composition() {
    let m = AttentionUNet::build(cfg(1, 4, true)).unwrap();
    let (x, gt) = gate_inputs(&m, 6);
    let (gated, coeff) = run_gate(&m, &x, &gt);

    let p = |name: &str| m.parameters().get(name).unwrap().clone();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(gt.clone());
    let conv = |g: &mut Graph, inp: Var, layer: &str, stride| {
        let k = g.constant(p(&format!("dec0.gate.{layer}.weight")));
        let b = g.constant(p(&format!("dec0.gate.{layer}.bias")));
        g.conv2d(inp, k, b, stride, 0).unwrap()
    };
    let tx = conv(&mut g, xv, "wx", 2);
    let pg = conv(&mut g, gv, "wg", 1);
    let s = g.add(tx, pg).unwrap();
    let s = g.relu(s);
    let s = conv(&mut g, s, "psi", 1);
    let s = g.sigmoid(s);
    let a = g.upsample2d(s, UpsampleMode::Bilinear).unwrap();
    let out = g.mul(xv, a).unwrap();
    assert!(g.value(a).max_abs_diff(&coeff) <= 1e-12);
    assert!(g.value(out).max_abs_diff(&gated) <= 1e-12);
}

#[test]
fn gate_traces_cover_every_level() {
    let m = AttentionUNet::build(cfg(3, 2, true)).unwrap();
    let mut g = Graph::new();
    let params = m.bind(&mut g, false);
    let x = g.constant(input(1, 16, 7));
    let trace = m.forward_graph(&mut g, &params, x).unwrap();
    assert_eq!(trace.gates.len(), 3);
    for gt in &trace.gates {
        assert_eq!(g.shape(gt.gated), g.shape(gt.skip));
        let c = g.value(gt.coefficients);
        assert!(c.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn weights_round_trip_and_zero_network() {
    let mut m = AttentionUNet::build(cfg(2, 3, true)).unwrap();
    let x = input(1, 8, 8);
    let before = m.forward(&x).unwrap();
    let w = m.get_weights();
    m.set_weights(&w).unwrap();
    assert_eq!(bits(m.forward(&x).unwrap().data()), bits(before.data()));

    assert!(m.set_weights(&w[1..]).is_err());
    assert_eq!(bits(&m.get_weights()), bits(&w));

    m.set_weights(&vec![0.0; w.len()]).unwrap();
    assert!(m.forward(&x).unwrap().data().iter().all(|&p| p == 0.5));
}

#[test]
fn load_parameters_names_first_mismatch() {
    let mut a = AttentionUNet::build(cfg(2, 2, true)).unwrap();
    let b = AttentionUNet::build(cfg(2, 3, true)).unwrap();
    let err = a.load_parameters(b.parameters().clone()).unwrap_err().to_string();
    assert!(err.contains("enc0.conv1.weight"), "{err}");
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let m = AttentionUNet::build(ModelConfig { init_seed: 3, ..cfg(1, 2, true) }).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::uniform(vec![1, 1, 8, 8], 0.0, 1.0, &mut r);
    let t = Tensor::uniform(vec![1, 1, 8, 8], 0.0, 1.0, &mut r).map(|v| (v > 0.7) as u8 as f64);
    let inputs: Vec<Tensor> = m.parameters().iter().map(|(_, t)| t.clone()).collect();
    let err = grad_check(
        |g, params| {
            let xv = g.constant(x.clone());
            let trace = m.forward_graph(g, params, xv)?;
            let tv = g.constant(t.clone());
            soft_dice_loss(g, trace.output, tv)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn checkpoint_round_trip_preserves_forward() {
    let m = AttentionUNet::build(cfg(2, 2, true)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fpwt");
    save_checkpoint(m.parameters(), &path).unwrap();
    let mut other = AttentionUNet::build(ModelConfig { init_seed: 1, ..cfg(2, 2, true) }).unwrap();
    other.load_parameters(load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(bits(&other.get_weights()), bits(&m.get_weights()));
}
