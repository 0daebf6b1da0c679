use candle_core::{DType, Device, Tensor};
use xut::backbone::{patchify, unpatchify, Block, BlockRole, ForwardTrace, Modulation, StreamCtx, Xut, XutConfig, XutInput};
use xut::geometry::{make_position_map, PositionMap, RopeFrequencies};
use xut::nn::{key_bias, ParamStore, RopeTable};
use xut::textcond::TextBatch;
use xut::verify::jitter_params;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = xut::seed::rng(seed, &[]);
    xut::flow::gaussian_like(shape, DType::F64, &mut rng).unwrap()
}

fn jittered(cfg: &XutConfig, seed: u64) -> (ParamStore, Xut) {
    let mut store = ParamStore::new(DType::F64, seed);
    let model = Xut::new(&mut store.root(), cfg).unwrap();
    jitter_params(&store, 0.2, seed).unwrap();
    (store, model)
}

fn text(b: usize, len: usize, ctx: usize, seed: u64) -> TextBatch {
    let rows: Vec<Tensor> = (0..b).map(|i| randn(&[len, ctx], seed + i as u64)).collect();
    TextBatch::from_rows(&rows).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
}

fn run(model: &Xut, image: &Tensor, pos: &PositionMap, txt: &TextBatch, trace: &mut ForwardTrace) -> Tensor {
    let b = image.dim(0).unwrap();
    let positions = vec![pos.clone(); b];
    let t = vec![0.37; b];
    model
        .forward_traced(
            &XutInput {
                image,
                positions: &positions,
                text: txt,
                t: &t,
                route: None,
            },
            trace,
        )
        .unwrap()
}

fn random_modulation(dim: usize, seed: u64) -> Modulation {
    let part = |k: u64| randn(&[1, 1, dim], seed * 10 + k);
    Modulation {
        shift_attn: part(0),
        gamma_attn: part(1),
        gate_attn: part(2),
        shift_mlp: part(3),
        gamma_mlp: part(4),
        gate_mlp: part(5),
    }
}

fn stream_ctx(len: usize, freqs: &RopeFrequencies) -> StreamCtx {
    let pos = make_position_map(2, 2).unwrap();
    let mut angles = Vec::new();
    for &c in pos.coords() {
        angles.extend(freqs.angles(c));
    }
    angles.resize(len * freqs.n_pairs(), 0.0);
    StreamCtx {
        rope: RopeTable::new(&[angles], len, freqs.n_pairs(), DType::F64, &Device::Cpu).unwrap(),
        bias: key_bias(&[vec![true; len]], DType::F64, &Device::Cpu).unwrap(),
    }
}

fn zero_vars(store: &ParamStore, pred: impl Fn(&str) -> bool) {
    for (name, var) in store.vars() {
        if pred(name) {
            var.set(&var.zeros_like().unwrap()).unwrap();
        }
    }
}

#[test]
fn output_shape_matches_input() {
    let cfg = XutConfig::toy();
    let mut store = ParamStore::new(DType::F32, 0);
    let model = Xut::new(&mut store.root(), &cfg).unwrap();
    let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
    let txt = text(1, 3, cfg.context_dim, 1).to_dtype(DType::F32).unwrap();
    let pos = make_position_map(16, 16).unwrap();
    let y = run(&model, &x, &pos, &txt, &mut ForwardTrace::default());
    assert_eq!(y.dims(), x.dims());
}

#[test]
fn zeroed_residual_branches_give_identity() {
    let (dim, heads, hd) = (16, 2, 8);
    let mut store = ParamStore::new(DType::F64, 3);
    let blk = Block::new(&mut store.root(), dim, 32, heads, hd, false).unwrap();
    jitter_params(&store, 0.2, 3).unwrap();
    zero_vars(&store, |n| n.starts_with("attn.o.") || n.starts_with("mlp.fc2."));
    let freqs = RopeFrequencies::standard(hd).unwrap();
    let x = randn(&[1, 6, dim], 4);
    let y = blk.forward(&x, &random_modulation(dim, 5), &stream_ctx(6, &freqs), None).unwrap();
    assert_eq!(max_diff(&x, &y), 0.0);
}

#[test]
fn zeroed_cross_projection_leaves_self_attention_path() {
    let (dim, heads, hd) = (16, 2, 8);
    let mut with = ParamStore::new(DType::F64, 6);
    let crossed = Block::new(&mut with.root(), dim, 32, heads, hd, true).unwrap();
    jitter_params(&with, 0.2, 6).unwrap();
    zero_vars(&with, |n| n.starts_with("cross.o."));
    let mut without = ParamStore::new(DType::F64, 7);
    let plain = Block::new(&mut without.root(), dim, 32, heads, hd, false).unwrap();
    for (name, var) in without.vars() {
        var.set(with.get(name).unwrap().as_tensor()).unwrap();
    }
    let freqs = RopeFrequencies::standard(hd).unwrap();
    let ctx = stream_ctx(6, &freqs);
    let m = random_modulation(dim, 8);
    let x = randn(&[1, 6, dim], 9);
    let skip = randn(&[1, 6, dim], 10);
    let a = crossed.forward(&x, &m, &ctx, Some(&skip)).unwrap();
    let b = plain.forward(&x, &m, &ctx, None).unwrap();
    assert_eq!(max_diff(&a, &b), 0.0);
}

#[test]
fn forward_is_deterministic() {
    let cfg = XutConfig::micro();
    let (_, m1) = jittered(&cfg, 12);
    let (_, m2) = jittered(&cfg, 12);
    let x = randn(&[2, 3, 8, 8], 13);
    let txt = text(2, 3, cfg.context_dim, 14);
    let pos = make_position_map(4, 4).unwrap();
    let a = run(&m1, &x, &pos, &txt, &mut ForwardTrace::default());
    let b = run(&m2, &x, &pos, &txt, &mut ForwardTrace::default());
    let c = run(&m1, &x, &pos, &txt, &mut ForwardTrace::default());
    let bits = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&a), bits(&c));
}

#[test]
fn skip_pairing_follows_the_u() {
    // n_enc=1, n_dec=2, n_depth=2: input -> a -> b, then trns(b, b) -> c, trns(c', a).
    let cfg = XutConfig::micro();
    let (_, model) = jittered(&cfg, 15);
    let mut trace = ForwardTrace::default();
    run(&model, &randn(&[1, 3, 8, 8], 16), &make_position_map(4, 4).unwrap(), &text(1, 2, 8, 17), &mut trace);
    assert_eq!(trace.encoder_states, 2);
    assert_eq!(trace.modulation_sets, 1);
    let roles: Vec<(BlockRole, Option<usize>)> = trace.events.iter().map(|e| (e.role, e.skip_from)).collect();
    assert_eq!(
        roles,
        vec![
            (BlockRole::Pre, None),
            (BlockRole::Encoder { depth: 1 }, None),
            (BlockRole::Encoder { depth: 2 }, None),
            (BlockRole::Decoder { depth: 1 }, Some(2)),
            (BlockRole::Decoder { depth: 1 }, None),
            (BlockRole::Decoder { depth: 2 }, Some(1)),
            (BlockRole::Decoder { depth: 2 }, None),
            (BlockRole::Post, None),
        ]
    );

    let mut deep = cfg.clone();
    deep.n_depth = 4;
    let (_, model) = jittered(&deep, 18);
    let mut trace = ForwardTrace::default();
    run(&model, &randn(&[1, 3, 8, 8], 19), &make_position_map(4, 4).unwrap(), &text(1, 2, 8, 20), &mut trace);
    let reads: Vec<usize> = trace.events.iter().filter_map(|e| e.skip_from).collect();
    assert_eq!(reads, vec![4, 3, 2, 1]);
    // The pairing is an involution.
    for d in 1..=4 {
        assert_eq!(model.skip_source(model.skip_source(d)), d);
    }
}

#[test]
fn shared_modulation_size_ignores_depth() {
    let mut a = XutConfig::micro();
    let mut b = a.clone();
    a.n_dec = 1;
    b.n_dec = 3;
    let (sa, ma) = jittered(&a, 0);
    let (sb, mb) = jittered(&b, 0);
    assert_eq!(ma.adaln().num_params(), mb.adaln().num_params());
    assert!(sb.num_params() > sa.num_params());
    assert_eq!(a.param_counts()["adaln"], b.param_counts()["adaln"]);
}

#[test]
fn analytic_counts_match_built_model() {
    for cfg in [XutConfig::micro(), XutConfig::toy()] {
        let mut store = ParamStore::new(DType::F32, 0);
        Xut::new(&mut store.root(), &cfg).unwrap();
        assert_eq!(store.num_params(), cfg.param_counts().values().sum::<usize>());
    }
}

#[test]
fn permuting_image_tokens_with_positions_permutes_output() {
    let cfg = XutConfig::micro();
    let (_, model) = jittered(&cfg, 21);
    let x = randn(&[1, 3, 8, 8], 22);
    let txt = text(1, 3, cfg.context_dim, 23);
    let pos = make_position_map(4, 4).unwrap();
    let n = 16;
    let mut rng = xut::seed::rng(24, &[]);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let idx = Tensor::from_vec(order.iter().map(|&i| i as u32).collect::<Vec<_>>(), n, &Device::Cpu).unwrap();

    let (tokens, grid) = patchify(&x, 2).unwrap();
    let x_perm = unpatchify(&tokens.index_select(&idx, 1).unwrap(), grid, 3, 2).unwrap();
    let y = run(&model, &x, &pos, &txt, &mut ForwardTrace::default());
    let y_perm = run(&model, &x_perm, &pos.permuted(&order), &txt, &mut ForwardTrace::default());

    let (y_tokens, _) = patchify(&y, 2).unwrap();
    let (yp_tokens, _) = patchify(&y_perm, 2).unwrap();
    let diff = max_diff(&y_tokens.index_select(&idx, 1).unwrap(), &yp_tokens);
    assert!(diff < 1e-5, "{diff}");
    // Without moving the positions the output genuinely changes.
    let y_wrong = run(&model, &x_perm, &pos, &txt, &mut ForwardTrace::default());
    let (yw_tokens, _) = patchify(&y_wrong, 2).unwrap();
    assert!(max_diff(&y_tokens.index_select(&idx, 1).unwrap(), &yw_tokens) > 1e-3);
}

#[test]
fn mismatched_positions_rejected() {
    let cfg = XutConfig::micro();
    let (_, model) = jittered(&cfg, 0);
    let x = randn(&[1, 3, 8, 8], 1);
    let txt = text(1, 2, cfg.context_dim, 2);
    let positions = vec![make_position_map(2, 8).unwrap()];
    let err = model.forward(&XutInput {
        image: &x,
        positions: &positions,
        text: &txt,
        t: &[0.5],
        route: None,
    });
    assert!(matches!(err, Err(xut::Error::Shape(_))));
}

#[test]
fn every_group_receives_gradient_under_routing() {
    let dead = xut::verify::gradient_reach(0.5, 2).unwrap();
    assert!(dead.is_empty(), "{dead:?}");
    let dead = xut::verify::gradient_reach(0.0, 2).unwrap();
    assert!(dead.is_empty(), "{dead:?}");
}
