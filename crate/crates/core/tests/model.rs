use mtsnet::attention::{AttentionConfig, AttentionKind, PositionMode, Variant};
use mtsnet::model::{
    count_parameters, load_checkpoint, save_checkpoint, Backbone, Model, ModelSpec, ResidualBlock, SecondOp, ShapePlan,
    StOp,
};
use mtsnet::nn::{Module, StateKind};
use mtsnet::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SMALL_WIDTHS: [usize; 5] = [4, 4, 8, 8, 8];
// Layer 4 keeps several tokens per frame, else the query and key maps
// cannot influence the output.
const SMALL_INPUT: [usize; 3] = [8, 16, 16];

fn small(spec: ModelSpec) -> ModelSpec {
    let mut spec = spec.with_input(SMALL_INPUT);
    spec.widths = SMALL_WIDTHS;
    spec
}

fn attention(kind: AttentionKind, position: PositionMode) -> AttentionConfig {
    let mut a = AttentionConfig::new(kind);
    a.position = position;
    a
}

fn input(n: usize, extent: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n, 1, extent[0], extent[1], extent[2]], 0.0, 1.0, &mut rng).unwrap()
}

#[test]
fn shape_plan_default_input() {
    let p = ShapePlan::new([12, 128, 128]);
    assert_eq!(p.stages, [[12, 128, 128], [12, 128, 128], [12, 64, 64], [6, 32, 32], [3, 16, 16]]);
}

proptest! {
    #[test]
    fn shape_plan_divides_by_eight_and_four(l in 1usize..8, h in 1usize..20, w in 1usize..20) {
        let p = ShapePlan::new([4 * l, 8 * h, 8 * w]);
        prop_assert_eq!(p.layer(4), [l, h, w]);
        prop_assert_eq!(p.layer(1), [4 * l, 8 * h, 8 * w]);
    }
}

#[test]
fn traced_stage_shapes() {
    let spec = small(ModelSpec::mtsnet(Variant::A));
    let m = Model::<f64>::build(&spec, 1).unwrap();
    let g = Graph::inference();
    let (y, trace) = m.forward_traced(&g, &g.constant(input(2, SMALL_INPUT, 0))).unwrap();
    assert_eq!(
        trace,
        vec![
            vec![2, 4, 8, 16, 16],
            vec![2, 4, 8, 16, 16],
            vec![2, 8, 8, 8, 8],
            vec![2, 8, 4, 4, 4],
            vec![2, 8, 2, 2, 2],
            vec![2, 8],
            vec![2, 1],
        ]
    );
    assert!(y.value().all_finite());
}

#[test]
fn malformed_input_is_a_shape_error() {
    let m = Model::<f64>::build(&small(ModelSpec::baseline(Backbone::R2plus1d)), 1).unwrap();
    let bad = input(1, [8, 16, 12], 0);
    assert!(matches!(m.predict(&bad), Err(Error::Shape(_))));
    let two_channels = Tensor::<f64>::zeros(&[1, 2, 8, 16, 16]);
    assert!(matches!(m.predict(&two_channels), Err(Error::Shape(_))));
}

#[test]
fn residual_block_with_zero_branch_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut block = ResidualBlock::<f64>::new(Backbone::R2plus1d, 4, 4, [1, 1, 1], None, &mut rng).unwrap();
    assert!(block.shortcut.is_none());
    match &mut block.second {
        SecondOp::Conv(StOp::Factored(st)) => st.temporal.conv.zero_(),
        _ => unreachable!(),
    }
    let x = Tensor::<f64>::randn(&[2, 4, 3, 4, 4], 0.0, 1.0, &mut rng).unwrap();
    let g = Graph::inference();
    let y = block.forward(&g, &g.constant(x.clone())).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn strided_block_halves_and_widens() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let block = ResidualBlock::<f64>::new(Backbone::R2plus1d, 8, 16, [2, 2, 2], None, &mut rng).unwrap();
    let x = Tensor::<f64>::randn(&[1, 8, 4, 6, 6], 0.0, 1.0, &mut rng).unwrap();
    let g = Graph::new();
    let y = block.forward(&g, &g.constant(x)).unwrap();
    assert_eq!(y.dims(), &[1, 16, 2, 3, 3]);
    let loss = g.sum_all(&y);
    let grads = g.backward(&loss).unwrap();
    let sc = block.shortcut.as_ref().expect("shape change needs a projection");
    let nonzero = |t: &Tensor<f64>| grads.param(t).is_some_and(|d| d.iter().any(|v| *v != 0.0));
    assert!(nonzero(&sc.conv.weight));
    assert!(nonzero(&sc.bn.gamma));
    match &block.first {
        StOp::Factored(st) => assert!(nonzero(&st.spatial.conv.weight)),
        _ => unreachable!(),
    }
}

fn dead_parameters(spec: &ModelSpec, recompute: bool) -> Vec<String> {
    let mut m = Model::<f64>::build(spec, 7).unwrap();
    m.recompute_early = recompute;
    let x = input(3, spec.input, 8);
    let g = Graph::new();
    let y = m.forward(&g, &g.constant(x)).unwrap();
    // A random projection so that no head weight sees a symmetric signal.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = Tensor::<f64>::randn(y.dims(), 0.0, 1.0, &mut rng).unwrap();
    let loss = g.sum_all(&g.mul(&y, &g.constant(r)).unwrap());
    let grads = g.backward(&loss).unwrap();
    let mut dead = Vec::new();
    m.for_each("", &mut |name, kind, t| {
        if kind == StateKind::Param && !grads.param(t).is_some_and(|d| d.iter().any(|v| *v != 0.0)) {
            dead.push(name.to_string());
        }
    });
    dead
}

#[test]
fn every_parameter_gets_a_gradient() {
    for spec in [
        ModelSpec::mtsnet(Variant::A),
        ModelSpec::mtsnet(Variant::D),
        ModelSpec::baseline(Backbone::R2plus1d),
        ModelSpec::baseline(Backbone::R3d),
    ] {
        let spec = small(spec);
        for recompute in [true, false] {
            let dead = dead_parameters(&spec, recompute);
            assert!(dead.is_empty(), "{:?} recompute={recompute}: {dead:?}", spec.attention.kind);
        }
    }
}

#[test]
fn recomputed_and_stored_gradients_agree() {
    let spec = small(ModelSpec::mtsnet(Variant::B));
    let mut m = Model::<f64>::build(&spec, 2).unwrap();
    let x = input(2, spec.input, 3);
    let mut run = |recompute: bool| {
        m.recompute_early = recompute;
        let g = Graph::new();
        let y = m.forward(&g, &g.constant(x.clone())).unwrap();
        let loss = g.sum_all(&y);
        let grads = g.backward(&loss).unwrap();
        let mut all = Vec::new();
        m.for_each("", &mut |_, kind, t| {
            if kind == StateKind::Param {
                all.extend_from_slice(grads.param(t).unwrap());
            }
        });
        all
    };
    let a = run(true);
    let b = run(false);
    assert_eq!(a.len(), b.len());
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()), "{u} vs {v}");
    }
}

#[test]
fn eval_forward_is_bit_identical() {
    let spec = small(ModelSpec::mtsnet(Variant::C));
    let m = Model::<f32>::build(&spec, 5).unwrap();
    let x = input(2, spec.input, 6).cast::<f32>();
    let a = m.predict(&x).unwrap();
    let b = m.predict(&x).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn early_layers_do_not_depend_on_attention() {
    let counts = |spec: ModelSpec| {
        let r = count_parameters(&Model::<f32>::build(&spec, 0).unwrap());
        r.groups.iter().take(3).cloned().collect::<Vec<_>>()
    };
    let reference = counts(ModelSpec::baseline(Backbone::R2plus1d));
    assert_eq!(reference.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(), ["stem", "layer1", "layer2"]);
    for kind in AttentionKind::ALL {
        let spec = ModelSpec::baseline(Backbone::R2plus1d).with_attention(AttentionConfig::new(kind));
        assert_eq!(counts(spec), reference, "{kind}");
    }
}

#[test]
fn report_sums_to_total() {
    let m = Model::<f32>::build(&ModelSpec::mtsnet(Variant::A), 0).unwrap();
    let r = count_parameters(&m);
    assert_eq!(r.groups.iter().map(|(_, n)| n).sum::<usize>(), r.total);
    assert_eq!(r.total, m.num_params());
    // One embedding set per attention block: C·(L + H + W).
    let expected = 2 * 256 * (6 + 32 + 32) + 2 * 512 * (3 + 16 + 16);
    assert_eq!(r.position_embeddings, expected);
    assert!(r.to_string().contains("total"));
}

#[test]
fn position_mode_only_moves_embedding_count() {
    let count = |kind, pos| {
        let spec = ModelSpec::baseline(Backbone::R2plus1d).with_attention(attention(kind, pos));
        count_parameters(&Model::<f32>::build(&spec, 0).unwrap())
    };
    for kind in [AttentionKind::Mhsa3d, AttentionKind::DepMhsa] {
        let off = count(kind, PositionMode::Off);
        let dual = count(kind, PositionMode::Dual);
        assert_eq!(off.position_embeddings, 0);
        assert_eq!(dual.total - off.total, dual.position_embeddings);
    }
}

#[test]
fn checkpoint_round_trip() {
    let spec = small(ModelSpec::mtsnet(Variant::A));
    let m = Model::<f32>::build(&spec, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    save_checkpoint(&m, &a).unwrap();
    save_checkpoint(&m, &b).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap());
    }
    let loaded = load_checkpoint::<f32>(&a).unwrap();
    assert_eq!(loaded.spec, spec);
    let x = input(2, spec.input, 12).cast::<f32>();
    assert_eq!(loaded.predict(&x).unwrap(), m.predict(&x).unwrap());
    let mut buffers = 0;
    loaded.for_each("", &mut |_, kind, t| {
        if kind == StateKind::Param {
            assert!(t.requires_grad());
        } else {
            buffers += 1;
        }
    });
    assert!(buffers > 0);
}

#[test]
fn checkpoint_mismatch_is_reported() {
    let spec = small(ModelSpec::mtsnet(Variant::A));
    let m = Model::<f32>::build(&spec, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, dir.path()).unwrap();

    let mut other = Model::<f32>::build(&small(ModelSpec::mtsnet(Variant::B)), 0).unwrap();
    assert!(matches!(other.load_state(dir.path()), Err(Error::Checkpoint(_))));

    // Same spec but a tensor file of the wrong size.
    let name = "head.weight";
    let wrong = Tensor::<f32>::zeros(&[3, 1]);
    mtsnet::tensor::io::save(&wrong, dir.path().join(format!("{name}.mtsv"))).unwrap();
    let mut same = Model::<f32>::build(&spec, 0).unwrap();
    assert!(matches!(same.load_state(dir.path()), Err(Error::Checkpoint(_))));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint::<f32>(empty.path()), Err(Error::Checkpoint(_))));
}
