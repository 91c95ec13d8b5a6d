mod common;

use common::{max_rel_diff, Mini};
use flowprompt::diffusion::{cfg_predict, ddim_step, initial_noise, sample_baseline};
use flowprompt::guidance::{
    dps_latent_step, init_prompt_state, opt_emb, sample_dps, sample_motionprompt, total_loss, GuidanceConfig,
    GuidanceTrace,
};
use flowprompt::vocab::CaptionTokens;
use flowprompt::{Error, Tensor};
use proptest::prelude::*;

fn prompt() -> CaptionTokens {
    CaptionTokens::parse("red circle moving right on plain").unwrap()
}

#[test]
fn empty_range_matches_baseline_bitwise() {
    let m = Mini::new(16, 4, 0);
    for lo in [0, 3, 10] {
        let cfg = GuidanceConfig { opt_range: [lo, lo], ..m.guidance() };
        let g = sample_motionprompt(&prompt(), 5, &cfg, &m.sampler, &m.models()).unwrap();
        let b = sample_baseline(&m.model, &m.schedule, &m.sampler, &prompt(), 5).unwrap();
        assert_eq!(g.output.latent, b.latent);
        assert_eq!(g.output.cond_hashes, b.cond_hashes);
        assert!(g.trace.records.is_empty());
    }
}

#[test]
fn k_records_per_optimised_step() {
    let m = Mini::new(16, 4, 1);
    for k in [1, 2, 3] {
        let cfg = GuidanceConfig { k_iters: k, ..m.guidance() };
        let g = sample_motionprompt(&prompt(), 2, &cfg, &m.sampler, &m.models()).unwrap();
        let steps: Vec<usize> = g.trace.records.iter().map(|r| r.step).collect();
        let expected: Vec<usize> = (2..6).flat_map(|s| std::iter::repeat_n(s, k)).collect();
        assert_eq!(steps, expected);
        let iters: Vec<usize> = g.trace.records.iter().map(|r| r.iter).collect();
        assert_eq!(iters, (2..6).flat_map(|_| 0..k).collect::<Vec<_>>());
        assert_eq!(g.trace.records[0].cosine, vec![1.0]);
        assert_eq!(g.trace.cosine_curve().len(), 4);
    }
}

#[test]
fn conditioning_changes_only_inside_range() {
    let m = Mini::new(16, 4, 2);
    let cfg = m.guidance();
    let g = sample_motionprompt(&prompt(), 3, &cfg, &m.sampler, &m.models()).unwrap();
    let b = sample_baseline(&m.model, &m.schedule, &m.sampler, &prompt(), 3).unwrap();
    assert_eq!(g.output.noise_hash, b.noise_hash);
    for (step, (gh, bh)) in g.output.cond_hashes.iter().zip(&b.cond_hashes).enumerate() {
        assert_eq!(gh == bh, !cfg.in_range(step), "step {step}");
    }
}

#[test]
fn zero_weights_leave_tokens_unchanged() {
    let m = Mini::new(16, 4, 3);
    let cfg = GuidanceConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..m.guidance() };
    let g = sample_motionprompt(&prompt(), 4, &cfg, &m.sampler, &m.models()).unwrap();
    assert_eq!(g.state.suffix(), g.state.initial());
    assert!(g.trace.records.iter().all(|r| r.grad_norm == 0.0 && r.cosine == vec![1.0]));
}

#[test]
fn base_rows_and_initial_tokens_stay_fixed() {
    let m = Mini::new(16, 4, 4);
    let cfg = GuidanceConfig { eta: 1e-2, ..m.guidance() };
    let fresh = init_prompt_state(&m.model, &prompt(), cfg.n_tokens, &cfg.init_words).unwrap();
    let rows: Vec<Tensor> = prompt().ids().iter().map(|&id| m.model.token_row(id)).collect();
    let g = sample_motionprompt(&prompt(), 4, &cfg, &m.sampler, &m.models()).unwrap();
    assert_eq!(g.state.initial(), fresh.initial());
    assert_ne!(g.state.suffix(), fresh.suffix());
    assert_eq!(g.state.base(), &prompt());
    let after: Vec<Tensor> = prompt().ids().iter().map(|&id| m.model.token_row(id)).collect();
    assert_eq!(rows, after);
}

#[test]
fn untrained_discriminator_is_refused() {
    let mut m = Mini::new(16, 4, 5);
    m.disc.set_trained(false);
    let err = sample_motionprompt(&prompt(), 0, &m.guidance(), &m.sampler, &m.models()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

#[test]
fn loss_outside_range_is_refused() {
    let m = Mini::new(16, 4, 6);
    let cfg = m.guidance();
    let st = init_prompt_state(&m.model, &prompt(), 1, &cfg.init_words).unwrap();
    let z = initial_noise(0, &m.sampler.latent_shape(&m.model));
    let u = m.model.predict_eps(&z, 500, &m.model.null_embedding());
    assert!(total_loss(&z, 500, 1, &st, &cfg, &m.models(), &u).is_err());
    assert!(total_loss(&z, 500, 2, &st, &cfg, &m.models(), &u).is_ok());
}

#[test]
fn non_finite_gradient_aborts_with_trace() {
    let m = Mini::new(16, 4, 7);
    let cfg = m.guidance();
    let mut st = init_prompt_state(&m.model, &prompt(), 1, &cfg.init_words).unwrap();
    let nan = st.suffix().map(|_| f64::NAN);
    st.set_suffix(nan).unwrap();
    let z = initial_noise(0, &m.sampler.latent_shape(&m.model));
    let mut trace = GuidanceTrace::default();
    let err = opt_emb(&z, 700, 2, &mut st, &cfg, &m.models(), &mut trace).unwrap_err();
    assert!(matches!(err, Error::Numerical(_)));
    assert_eq!(trace.records.len(), 1);
}

#[test]
fn dps_with_zero_step_is_plain_ddim() {
    let m = Mini::new(8, 2, 8);
    let cfg = GuidanceConfig { dps_gamma: Some(0.0), ..m.guidance() };
    let z = initial_noise(1, &m.sampler.latent_shape(&m.model));
    let cond = m.model.encode_text(&prompt()).unwrap();
    let uncond = m.model.null_embedding();
    let s = dps_latent_step(&z, 600, 500, 0.0, &cond, &uncond, &cfg, &m.models()).unwrap();
    let eps = cfg_predict(&m.model, &z, 600, &cond, &uncond, m.sampler.cfg_scale);
    let plain = ddim_step(&z, 600, 500, &eps, &m.schedule).unwrap();
    assert!(max_rel_diff(&s.z_prev, &plain) < 1e-12, "{}", max_rel_diff(&s.z_prev, &plain));
    assert!(s.grad.sq_norm() > 0.0);

    let (out, steps) = sample_dps(&prompt(), 1, &cfg, &m.sampler, &m.models()).unwrap();
    let base = sample_baseline(&m.model, &m.schedule, &m.sampler, &prompt(), 1).unwrap();
    assert_eq!(steps.len(), 4);
    assert!(max_rel_diff(&out.latent, &base.latent) < 1e-9);
}

#[test]
fn dps_needs_a_step_size() {
    let m = Mini::new(8, 2, 9);
    let err = sample_dps(&prompt(), 0, &m.guidance(), &m.sampler, &m.models()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn dps_tape_outgrows_prompt_tape() {
    let m = Mini::new(16, 4, 10);
    let cfg = GuidanceConfig { dps_gamma: Some(1e-3), ..m.guidance() };
    let (_, steps) = sample_dps(&prompt(), 0, &cfg, &m.sampler, &m.models()).unwrap();
    let g = sample_motionprompt(&prompt(), 0, &cfg, &m.sampler, &m.models()).unwrap();
    let dps = steps.iter().map(|s| s.graph_bytes).max().unwrap();
    let ours = g.trace.records.iter().map(|r| r.graph_bytes).max().unwrap();
    assert!(dps > ours, "{dps} vs {ours}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn ranges_outside_the_grid_are_rejected(lo in 0usize..20, hi in 0usize..20) {
        let cfg = GuidanceConfig { opt_range: [lo, hi], ..GuidanceConfig::default() };
        prop_assert_eq!(cfg.validate(10, 4).is_ok(), lo <= hi && hi <= 10);
        for s in 0..10 {
            prop_assert_eq!(cfg.in_range(s), lo <= s && s < hi);
        }
    }

    #[test]
    fn reg_term_is_squared_drift(seed in 0u64..1000, scale in 0.0f64..0.5) {
        let m = Mini::new(8, 2, 11);
        let cfg = GuidanceConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 1.0, ..m.guidance() };
        let mut st = init_prompt_state(&m.model, &prompt(), 2, &cfg.init_words).unwrap();
        let shift = initial_noise(seed, st.suffix().shape()).map(|x| x * scale);
        let moved = st.suffix().zip_map(&shift, |a, b| a + b);
        st.set_suffix(moved).unwrap();
        let z = initial_noise(seed, &m.sampler.latent_shape(&m.model));
        let u = m.model.predict_eps(&z, 300, &m.model.null_embedding());
        let e = total_loss(&z, 300, 2, &st, &cfg, &m.models(), &u).unwrap();
        prop_assert!((e.reg - shift.sq_norm()).abs() <= 1e-12 * (1.0 + e.reg));
        prop_assert!((e.total - e.reg).abs() <= 1e-12 * (1.0 + e.reg));
        let expect = shift.map(|x| 2.0 * x);
        prop_assert!(max_rel_diff(&e.grad, &expect) < 1e-9 || expect.max_abs() == 0.0);
        let cos = st.cosine_per_token();
        prop_assert!(cos.iter().all(|c| (-1.0..=1.0).contains(c)));
    }
}
