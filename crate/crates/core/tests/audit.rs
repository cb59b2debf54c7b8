use pointlora_core::model::{audit_parameters, AuditReport, Model, ModelConfig};
use pointlora_core::nn::Group;

fn report(cfg: ModelConfig) -> AuditReport {
    audit_parameters(&Model::<f32>::zeroed(cfg, true).unwrap())
}

fn within(got: usize, want_millions: f64, rel: f64) -> bool {
    let want = want_millions * 1e6;
    ((got as f64 - want) / want).abs() <= rel
}

// Hand-derived per-group sizes for the Point-MAE-shaped encoder
// (d=384, 12 blocks, 6 heads, FFN 1536, no qkv bias).
#[test]
fn point_mae_group_sizes() {
    let r = report(ModelConfig::default());
    let get = |g: Group| r.rows.iter().find(|x| x.group == g).unwrap();
    let (d, l, f) = (384usize, 12usize, 1536usize);
    // 3→128→256, then 512→512→384
    assert_eq!(get(Group::Tokenizer).total, (3 * 128 + 128) + (128 * 256 + 256) + (512 * 512 + 512) + (512 * d + d));
    assert_eq!(get(Group::Positional).total, (3 * 128 + 128) + (128 * d + d));
    assert_eq!(get(Group::ClassToken).total, 2 * d);
    assert_eq!(get(Group::Norm).total, (2 * l + 1) * 2 * d);
    assert_eq!(get(Group::Attention).total, l * (d * 3 * d + d * d + d));
    assert_eq!(get(Group::Ffn).total, l * (d * f + f + f * d + d));
    // rank 8 on qkv (384→1152) and proj (384→384)
    assert_eq!(get(Group::Lora).total, l * 8 * ((d + 3 * d) + (d + d)));
    // qkv prompt 384→32→1152, FFN prompt 1536→32→384
    assert_eq!(get(Group::PromptMlp).total, (d * 32 + 32 + 32 * 3 * d + 3 * d) + (f * 32 + 32 + 32 * d + d));
    assert_eq!(get(Group::MaskPredictor).total, d * d + d + d + 1);
    assert_eq!(get(Group::Head).total, (2 * d * 256 + 256) + (256 * 256 + 256) + (256 * 15 + 15));
    for row in &r.rows {
        let frozen_backbone = matches!(row.group, Group::Tokenizer | Group::Positional | Group::Attention | Group::Ffn);
        assert_eq!(row.tunable == 0, frozen_backbone, "{}", row.group.name());
    }
    assert_eq!(r.total, r.rows.iter().map(|x| x.total).sum::<usize>());
}

#[test]
fn default_matches_headline_budget() {
    let r = report(ModelConfig::default());
    assert!(within(r.tunable, 0.77, 0.05), "{}", r.tunable);
    assert!((r.ratio * 100.0 - 3.43).abs() <= 0.3, "{}", r.ratio);
}

#[test]
fn lora_only_budget() {
    let mut c = ModelConfig::default();
    c.peft.token_selection = false;
    let t = report(c).tunable;
    assert!(within(t, 0.53, 0.05), "{t}");
}

#[test]
fn rank_sweep() {
    for (rank, want) in [(4, 0.66), (16, 0.99), (32, 1.44)] {
        let mut c = ModelConfig::default();
        c.peft.rank = rank;
        let t = report(c).tunable;
        assert!(within(t, want, 0.05), "rank {rank}: {t}");
    }
}

#[test]
fn prompt_width_sweep() {
    for (width, want) in [(8, 0.68), (16, 0.71), (64, 0.90)] {
        let mut c = ModelConfig::default();
        c.peft.prompt_width = width;
        let t = report(c).tunable;
        assert!(within(t, want, 0.05), "width {width}: {t}");
    }
}

#[test]
fn injection_depth_scales_adapter_cost() {
    let full = report(ModelConfig::default()).tunable;
    for (range, blocks) in [([1, 3], 3), ([1, 6], 6), ([1, 9], 9), ([8, 12], 5)] {
        let mut c = ModelConfig::default();
        c.peft.blocks = Some(range);
        let t = report(c).tunable;
        assert_eq!(full - t, (12 - blocks) * 8 * (4 * 384 + 2 * 384), "{range:?}");
    }
}

#[test]
fn adapters_only_change_lora_row() {
    let with = Model::<f32>::zeroed(ModelConfig::default(), true).unwrap();
    let without = Model::<f32>::zeroed(ModelConfig::default(), false).unwrap();
    let a = audit_parameters(&with);
    let b = audit_parameters(&without);
    let lora = a.rows.iter().find(|r| r.group == Group::Lora).unwrap().total;
    assert_eq!(a.total - b.total, lora);
    assert!(b.rows.iter().all(|r| r.group != Group::Lora));
}
