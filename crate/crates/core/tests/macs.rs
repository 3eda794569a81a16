use trilevel_core::macs::{check_agreement, dense_macs, from_counter, sparse_macs, sparse_macs_at};
use trilevel_core::{SparsityConfig, ViT, ViTConfig};
use trilevel_tensor::{Tape, Tensor};

fn small(cls: bool) -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        depth: 4,
        d_model: 16,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 5,
        use_cls_token: cls,
    }
}

fn images(cfg: &ViTConfig, batch: usize) -> Tensor<f32> {
    Tensor::from_fn(&[batch, cfg.channels, cfg.image_size, cfg.image_size], |i| {
        ((i * 7919 % 1013) as f32 / 1013.0 - 0.5) * 2.0
    })
}

fn instrumented(cfg: &ViTConfig, sp: Option<&SparsityConfig>, epoch: usize) -> trilevel_core::macs::CostReport {
    let model = ViT::<f32>::new(cfg, 4).unwrap();
    let mut tape = Tape::new();
    model.forward(&mut tape, &images(cfg, 3), sp, epoch).unwrap();
    assert_eq!(tape.macs().unscoped, 0);
    from_counter(cfg, tape.macs(), 3)
}

#[test]
fn dense_forward_matches_closed_form() {
    for cls in [true, false] {
        let cfg = small(cls);
        check_agreement(&dense_macs(&cfg), &instrumented(&cfg, None, 0)).unwrap();
    }
}

#[test]
fn sparse_forward_matches_analytic() {
    for cls in [true, false] {
        let cfg = small(cls);
        for sp in [
            SparsityConfig::tri_level(0.7, vec![2, 4]),
            SparsityConfig::tri_level(0.5, vec![3]),
            SparsityConfig {
                r_t: 0.6,
                r_a: 0.3,
                prune_layers: vec![2, 3, 4],
                ..SparsityConfig::default()
            },
        ] {
            check_agreement(&sparse_macs(&cfg, &sp), &instrumented(&cfg, Some(&sp), 0)).unwrap();
        }
    }
}

#[test]
fn warm_up_epochs_match_analytic() {
    let cfg = small(true);
    let sp = SparsityConfig {
        rt_warmup_epochs: 4,
        ..SparsityConfig::tri_level(0.5, vec![2, 4])
    };
    for epoch in 0..6 {
        check_agreement(&sparse_macs_at(&cfg, &sp, epoch), &instrumented(&cfg, Some(&sp), epoch))
            .unwrap();
    }
    assert!(sparse_macs_at(&cfg, &sp, 0).total_per_image > sparse_macs_at(&cfg, &sp, 4).total_per_image);
}

#[test]
fn masked_layer_pair_count() {
    // K patches, k keys each: [CLS] row sees 1 + K tokens, every patch k + 1.
    let cfg = small(true);
    let sp = SparsityConfig::tri_level(0.5, vec![2]);
    let r = sparse_macs(&cfg, &sp);
    let (k_tokens, k_keys, d) = (8u64, 4u64, 16u64);
    assert_eq!(r.per_layer[2].attn_logits, ((1 + k_tokens) + k_tokens * (k_keys + 1)) * d);
    // the layer feeding the selector stays dense
    assert_eq!(r.per_layer[0].attn_logits, 17 * 17 * d);
}
