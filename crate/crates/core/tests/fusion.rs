mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tilefuse::fusion::{
    fuse_post_channel, fuse_post_interleave, fuse_pre, Branch, FusionStrategy, Projector,
    TokenOrigin, VisualSequence,
};
use tilefuse::model::{HybridModel, PreparedSample, PROJECTOR_A, PROJECTOR_B};
use tilefuse::tensor::{Graph, ParamStore, Session, Tensor};
use tilefuse::Error;

/// A branch sequence of `n_tiles × per_tile` rows of width `d`; row values
/// encode (branch, tile, position) so they can be traced after fusion.
fn branch_seq(g: &mut Graph, branch: Branch, n_tiles: usize, per_tile: usize, d: usize) -> VisualSequence {
    let tag = if branch == Branch::A { 0.0 } else { 1.0 };
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for tile in 0..n_tiles {
        for position in 0..per_tile {
            provenance.push(TokenOrigin { tile, branch, position });
            data.push(tag);
            data.push(tile as f64);
            data.push(position as f64);
            data.extend(std::iter::repeat_n(0.5, d - 3));
        }
    }
    let emb = g.constant(vec![n_tiles * per_tile, d], data).unwrap();
    VisualSequence {
        embeddings: Some(emb),
        provenance,
        n_tiles,
    }
}

fn check_interleave(n: usize, ta: usize, tb: usize) -> Result<(), TestCaseError> {
    let d = 4;
    let mut g = Graph::new();
    let a = branch_seq(&mut g, Branch::A, n, ta, d);
    let b = branch_seq(&mut g, Branch::B, n, tb, d);
    let out = fuse_post_interleave(&mut g, &a, &b).unwrap();
    prop_assert_eq!(out.len(), n * (ta + tb));
    let rows = g.value(out.embeddings.unwrap()).to_vec();
    // every row matches its provenance: a permutation of the inputs
    for (i, o) in out.provenance.iter().enumerate() {
        let tag = if o.branch == Branch::A { 0.0 } else { 1.0 };
        prop_assert_eq!(&rows[i * d..i * d + 3], &[tag, o.tile as f64, o.position as f64][..]);
    }
    let mut seen: Vec<_> = out.provenance.clone();
    let mut want: Vec<_> = a.provenance.iter().chain(&b.provenance).copied().collect();
    let key = |o: &TokenOrigin| (o.branch, o.tile, o.position);
    seen.sort_by_key(key);
    want.sort_by_key(key);
    prop_assert_eq!(seen, want);
    // tile blocks, A before B, relative order preserved per branch
    prop_assert!(out.provenance.windows(2).all(|w| w[0].tile <= w[1].tile));
    for t in 0..n {
        let block: Vec<_> = out.provenance.iter().filter(|o| o.tile == t).collect();
        let first_b = block.iter().position(|o| o.branch == Branch::B).unwrap_or(block.len());
        prop_assert!(block[..first_b].iter().all(|o| o.branch == Branch::A));
        prop_assert!(block[first_b..].iter().all(|o| o.branch == Branch::B));
    }
    for br in [Branch::A, Branch::B] {
        let src = if br == Branch::A { &a.provenance } else { &b.provenance };
        let kept: Vec<_> = out.provenance.iter().filter(|o| o.branch == br).copied().collect();
        prop_assert_eq!(&kept, src);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn interleave_is_an_order_preserving_tile_block_permutation(
        n in 1usize..8, ta in 1usize..10, tb in 1usize..10,
    ) {
        check_interleave(n, ta, tb)?;
    }

    #[test]
    fn channel_fusion_length_law(n in 1usize..6, t in 1usize..10) {
        let d = 4;
        let mut g = Graph::new();
        let a = branch_seq(&mut g, Branch::A, n, t, d);
        let b = branch_seq(&mut g, Branch::B, n, t, d);
        let down = g.constant(vec![2 * d, d], vec![0.1; 2 * d * d]).unwrap();
        let out = fuse_post_channel(&mut g, &a, &b, down).unwrap();
        prop_assert_eq!(out.len(), a.len());
        prop_assert_eq!(g.shape(out.embeddings.unwrap()), &[n * t, d][..]);
        prop_assert_eq!(out.tile_counts(), a.tile_counts());
    }
}

#[test]
fn channel_fusion_with_identity_top_block_returns_branch_a() {
    let d = 5;
    let mut g = Graph::new();
    let a = branch_seq(&mut g, Branch::A, 2, 3, d);
    let b = branch_seq(&mut g, Branch::B, 2, 3, d);
    let mut w = vec![0.0; 2 * d * d];
    for i in 0..d {
        w[i * d + i] = 1.0;
    }
    let down = g.constant(vec![2 * d, d], w).unwrap();
    let out = fuse_post_channel(&mut g, &a, &b, down).unwrap();
    assert_eq!(g.value(out.embeddings.unwrap()), g.value(a.embeddings.unwrap()));
}

#[test]
fn channel_fusion_rejects_unequal_counts() {
    let mut g = Graph::new();
    let a = branch_seq(&mut g, Branch::A, 2, 3, 4);
    let b = branch_seq(&mut g, Branch::B, 2, 2, 4);
    let down = g.constant(vec![8, 4], vec![0.0; 32]).unwrap();
    assert!(matches!(fuse_post_channel(&mut g, &a, &b, down), Err(Error::Contract(_))));
}

#[test]
fn pre_channel_with_zero_b_slice_matches_a_alone() {
    let (ca, cb, d) = (3, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let shared = Projector::new(&mut store, "shared", ca + cb, 6, d, &mut rng).unwrap();
    let mut store_a = ParamStore::new();
    let alone = Projector::new(&mut store_a, "shared", ca, 6, d, &mut rng).unwrap();
    // zero the B rows of the shared first layer; give `alone` the A rows and
    // every other parameter verbatim
    let w = store.get(shared.mlp.fc1.w).tensor.data().to_vec();
    store_a.get_mut(alone.mlp.fc1.w).tensor.data_mut().copy_from_slice(&w[..ca * 6]);
    store.get_mut(shared.mlp.fc1.w).tensor.data_mut()[ca * 6..].fill(0.0);
    let pairs = [
        (shared.mlp.fc1.b.unwrap(), alone.mlp.fc1.b.unwrap()),
        (shared.mlp.fc2.w, alone.mlp.fc2.w),
        (shared.mlp.fc2.b.unwrap(), alone.mlp.fc2.b.unwrap()),
    ];
    for (src, dst) in pairs {
        store_a.get_mut(dst).tensor = store.get(src).tensor.clone();
    }
    let a_raw = Tensor::from_fn(vec![2, ca, 2, 2], |i| (i as f64 * 0.37).sin());
    let b_raw = Tensor::from_fn(vec![2, cb, 2, 2], |i| (i as f64 * 0.11).cos());
    let mut s = Session::new(&store);
    let ar = s.graph.leaf(a_raw.clone());
    let br = s.graph.leaf(b_raw);
    let fused = fuse_pre(&mut s, ar, br, FusionStrategy::PreChannel, &shared).unwrap();
    assert_eq!(fused.len(), 8);
    let mut s2 = Session::new(&store_a);
    let ar2 = s2.graph.leaf(a_raw);
    let solo = alone.project(&mut s2, ar2, Branch::A).unwrap();
    let (x, y) = (s.graph.value(fused.embeddings.unwrap()), s2.graph.value(solo.embeddings.unwrap()));
    for (p, q) in x.iter().zip(y) {
        assert!((p - q).abs() < 1e-12, "{p} vs {q}");
    }
}

#[test]
fn pre_sequence_needs_equal_widths() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let shared = Projector::new(&mut store, "shared", 3, 4, 4, &mut rng).unwrap();
    let mut s = Session::new(&store);
    let a = s.graph.leaf(Tensor::zeros(vec![1, 3, 2, 2]));
    let b = s.graph.leaf(Tensor::zeros(vec![1, 2, 2, 2]));
    assert!(matches!(
        fuse_pre(&mut s, a, b, FusionStrategy::PreSequence, &shared),
        Err(Error::Dimension { .. })
    ));
    let b = s.graph.leaf(Tensor::zeros(vec![1, 3, 1, 1]));
    let out = fuse_pre(&mut s, a, b, FusionStrategy::PreSequence, &shared).unwrap();
    assert_eq!(out.len(), 5);
    assert_eq!(out.provenance[4].branch, Branch::B);
}

#[test]
fn fused_length_laws_at_paper_scale() {
    let (a, b) = common::paper_encoders();
    let (ta, tb) = (a.tokens_per_tile(), b.tokens_per_tile());
    assert_eq!(FusionStrategy::PostInterleave.fused_tokens(ta, tb), 512);
    assert_eq!(FusionStrategy::PreSequence.fused_tokens(ta, tb), 512);
    assert_eq!(FusionStrategy::PostChannel.fused_tokens(ta, tb), 256);
    assert_eq!(FusionStrategy::PreChannel.fused_tokens(ta, tb), 256);
    assert_eq!(a.out_channels() + b.out_channels(), 4096 + 4096);
}

#[test]
fn every_strategy_builds_and_matches_its_length_law() {
    let img = common::pattern_image(8, 16, 2);
    for fusion in FusionStrategy::ALL {
        let mut cfg = common::tiny_model(fusion);
        if fusion == FusionStrategy::PreSequence {
            // equal widths: 4·2² = 16 for A, so give B 1·4² = 16
            cfg.encoder_b.as_mut().unwrap().embed_dim = 1;
        }
        let model = HybridModel::new(cfg.clone(), 3).unwrap();
        let sample = PreparedSample::new(&cfg, &[img.clone()], "q", "a").unwrap();
        let mut s = Session::new(&model.store);
        let vis = model.visual(&mut s, &sample.images[0], None).unwrap();
        assert_eq!(vis.len(), 2 * cfg.fused_tokens_per_tile(), "{fusion}");
        assert_eq!(sample.visual_tokens(&cfg), vis.len());
    }
}

#[test]
fn unknown_fusion_kind_is_rejected() {
    assert!(matches!("cross-attention".parse::<FusionStrategy>(), Err(Error::Config(_))));
    assert!(serde_json::from_str::<FusionStrategy>("\"mr-adapter\"").is_err());
    for k in FusionStrategy::ALL {
        assert_eq!(k.as_str().parse::<FusionStrategy>().unwrap(), k);
    }
}

#[test]
fn both_projectors_receive_gradient_under_interleave() {
    let cfg = common::tiny_model(FusionStrategy::PostInterleave);
    let model = HybridModel::new(cfg.clone(), 8).unwrap();
    let sample = PreparedSample::new(&cfg, &[common::pattern_image(8, 16, 3)], "which?", "b").unwrap();
    let mut s = Session::new(&model.store);
    let loss = model.sample_loss(&mut s, &sample, None).unwrap().unwrap();
    s.graph.backward(loss).unwrap();
    let grads = s.param_grads();
    for prefix in [PROJECTOR_A, PROJECTOR_B] {
        let norm: f64 = grads
            .iter()
            .filter(|(id, _)| model.store.get(*id).name.starts_with(prefix))
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum();
        assert!(norm > 0.0, "{prefix} got no gradient");
    }
}
