use tsgsim_core::audit::audit_device;
use tsgsim_core::workload::{
    run_datagen, run_rl_rollout, DatagenMode, EpisodeSpec, Metrics, Phase, PhaseCost, RolloutMode,
    RolloutSpec, Testbed,
};
use tsgsim_core::{DeviceConfig, EventKind, WorkloadError};

fn bed(costs: PhaseCost) -> Testbed {
    Testbed::new(DeviceConfig::default(), costs).unwrap()
}

fn datagen(costs: PhaseCost, steps: usize, batch: u32, mode: DatagenMode) -> (Metrics, Testbed) {
    let mut tb = bed(costs);
    let m = run_datagen(&mut tb, EpisodeSpec { steps, batch, mode }).unwrap();
    (m, tb)
}

fn rollout(costs: PhaseCost, horizon: usize, batch: u32, groups: u32, mode: RolloutMode) -> (Metrics, Testbed) {
    let mut tb = bed(costs);
    let spec = RolloutSpec {
        horizon,
        batch,
        groups,
        mode,
    };
    let m = run_rl_rollout(&mut tb, spec).unwrap();
    (m, tb)
}

fn phases(m: &Metrics, p: Phase) -> Vec<(usize, usize, f64, f64)> {
    m.phases
        .iter()
        .filter(|r| r.phase == p)
        .map(|r| (r.group, r.k, r.start, r.end))
        .collect()
}

/// Two-stage pipeline with one buffer between stages.
fn pipeline_oracle(s: f64, r: f64, k: usize) -> f64 {
    s + (k as f64 - 1.0) * s.max(r) + r
}

/// Replays the interleaved rollout host program against two serial
/// device queues that never slow each other down.
fn rollout_oracle(c: &PhaseCost, horizon: usize, batch: u32, groups: u32) -> f64 {
    let h = batch / groups;
    let (mut t, mut sim_free, mut render_free) = (0.0f64, 0.0f64, 0.0f64);
    let mut frame_ready = vec![0.0f64; groups as usize];
    for _ in 0..horizon {
        for ready in frame_ready.iter_mut() {
            t = t.max(*ready) + c.inference(h);
            let s_end = t.max(sim_free) + c.sim(h);
            sim_free = s_end;
            t = s_end;
            let r_end = t.max(render_free) + c.render(h);
            render_free = r_end;
            *ready = r_end;
        }
    }
    frame_ready.into_iter().fold(t, f64::max)
}

#[test]
fn two_steps_balanced_by_hand() {
    let c = PhaseCost::balanced(1.0);
    let (seq, _) = datagen(c, 2, 1, DatagenMode::Sequential);
    let (pipe, _) = datagen(c, 2, 1, DatagenMode::Pipelined);
    assert!((seq.makespan - 4.0).abs() < 1e-9);
    assert!((pipe.makespan - 3.0).abs() < 1e-9);
}

#[test]
fn pipelined_datagen_overlaps_next_sim_with_render() {
    let (m, tb) = datagen(PhaseCost::default(), 20, 128, DatagenMode::Pipelined);
    let sims = phases(&m, Phase::Sim);
    let renders = phases(&m, Phase::Render);
    assert_eq!(sims.len(), 20);
    assert_eq!(renders.len(), 20);
    for k in 0..20 {
        assert!(renders[k].2 >= sims[k].3 - 1e-9);
        if k + 1 < 20 {
            assert!(sims[k + 1].2 >= sims[k].3 - 1e-9);
        }
    }
    // at least one sim(k+1) started before render(k) ended
    assert!((0..19).any(|k| sims[k + 1].2 < renders[k].3 - 1e-9));
    assert_eq!(m.sim_signals, 20);
    assert_eq!(m.render_signals, 20);
    audit_device(&tb.dev).unwrap();
}

#[test]
fn sequential_datagen_never_overlaps_or_binds() {
    let (m, tb) = datagen(PhaseCost::default(), 10, 64, DatagenMode::Sequential);
    let mut all: Vec<_> = m
        .phases
        .iter()
        .filter(|p| p.phase != Phase::Inference)
        .map(|p| (p.start, p.end))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    assert!(all.windows(2).all(|w| w[0].1 <= w[1].0 + 1e-9));
    assert!(!tb.dev.events().iter().any(|e| e.event == EventKind::Bind));
    assert_eq!(m.env_steps, 640);
    audit_device(&tb.dev).unwrap();
}

#[test]
fn single_step_costs_exactly_its_duration() {
    let c = PhaseCost::default();
    let mut tb = bed(c);
    let t0 = tb.dev.now();
    let h = tb.step_async(0, 0, 100).unwrap();
    tb.wait_step(h).unwrap();
    assert!((tb.dev.now() - t0 - c.sim(100)).abs() < 1e-9);
}

#[test]
fn dependency_guards() {
    let mut tb = bed(PhaseCost::default());
    assert!(matches!(tb.render_async(0, 0, 8), Err(WorkloadError::Dependency(_))));
    let h = tb.step_async(0, 0, 8).unwrap();
    assert!(matches!(tb.step_async(0, 1, 8), Err(WorkloadError::Dependency(_))));
    assert!(matches!(tb.render_async(0, 0, 8), Err(WorkloadError::Dependency(_))));
    tb.wait_step(h).unwrap();
    assert!(matches!(tb.step_async(0, 5, 8), Err(WorkloadError::Dependency(_))));
    let r = tb.render_async(0, 0, 8).unwrap();
    assert!(matches!(tb.render_async(0, 0, 8), Err(WorkloadError::Dependency(_))));
    assert!(matches!(tb.wait_step(r), Err(WorkloadError::Dependency(_))));
}

#[test]
fn semaphore_targets_increase_across_steps() {
    let mut tb = bed(PhaseCost::default());
    let mut last = 0;
    for k in 0..5 {
        let h = tb.step_async(0, k, 8).unwrap();
        assert!(h.target() > last);
        last = h.target();
        tb.wait_step(h).unwrap();
    }
}

#[test]
fn double_bind_is_rejected() {
    let mut tb = bed(PhaseCost::default());
    tb.custream_bind().unwrap();
    assert!(tb.custream_bind().is_err());
    tb.custream_unbind().unwrap();
}

#[test]
fn render_cost_is_affine_in_batch() {
    let c = PhaseCost::default();
    let slope = (c.render(200) - c.render(100)) / 100.0;
    assert!((c.render(300) - (c.render(100) + 200.0 * slope)).abs() < 1e-12);
    let (m, _) = datagen(c, 1, 300, DatagenMode::Sequential);
    let r = phases(&m, Phase::Render)[0];
    assert!((r.3 - r.2 - c.render(300)).abs() < 1e-9);
}

#[test]
fn rollout_groups_run_at_half_batch() {
    let (m, _) = rollout(PhaseCost::rollout(), 3, 64, 2, RolloutMode::Interleaved);
    assert!(m.phases.iter().all(|p| p.batch == 32));
    let c = PhaseCost::rollout();
    let s = phases(&m, Phase::Sim)[0];
    assert!((s.3 - s.2 - c.sim(32)).abs() < 1e-9);
    assert_eq!(m.env_steps, 3 * 64);

    let mut tb = bed(c);
    let bad = RolloutSpec {
        horizon: 1,
        batch: 63,
        groups: 2,
        mode: RolloutMode::Interleaved,
    };
    assert!(matches!(run_rl_rollout(&mut tb, bad), Err(WorkloadError::InvalidSpec(_))));
}

#[test]
fn rollout_preserves_the_per_group_chain() {
    let c = PhaseCost {
        inference_base: 0.05,
        ..PhaseCost::balanced(1.0)
    };
    let (m, tb) = rollout(c, 8, 128, 2, RolloutMode::Interleaved);
    for g in 0..2 {
        let inf: Vec<_> = phases(&m, Phase::Inference).into_iter().filter(|p| p.0 == g).collect();
        let ren: Vec<_> = phases(&m, Phase::Render).into_iter().filter(|p| p.0 == g).collect();
        let sim: Vec<_> = phases(&m, Phase::Sim).into_iter().filter(|p| p.0 == g).collect();
        for k in 0..8 {
            assert!(sim[k].2 >= inf[k].3 - 1e-9);
            assert!(ren[k].2 >= sim[k].3 - 1e-9);
            if k + 1 < 8 {
                assert!(inf[k + 1].2 >= ren[k].3 - 1e-9);
            }
        }
    }
    // one group's sim overlaps the other group's render
    let sims = phases(&m, Phase::Sim);
    let rens = phases(&m, Phase::Render);
    assert!(sims
        .iter()
        .any(|s| rens.iter().any(|r| r.0 != s.0 && s.2 < r.3 - 1e-9 && r.2 < s.3 - 1e-9)));
    audit_device(&tb.dev).unwrap();
}

#[test]
fn single_group_interleaving_gains_nothing() {
    let c = PhaseCost::rollout();
    let (seq, _) = rollout(c, 20, 64, 1, RolloutMode::Sequential);
    let (one, _) = rollout(c, 20, 64, 1, RolloutMode::Interleaved);
    assert!((seq.makespan / one.makespan - 1.0).abs() < 1e-9);
}

#[test]
fn pipelined_compute_utilization_exceeds_sequential() {
    let c = PhaseCost::default();
    let (seq, _) = datagen(c, 30, 256, DatagenMode::Sequential);
    let (pipe, _) = datagen(c, 30, 256, DatagenMode::Pipelined);
    let mean = |m: &Metrics| m.engine.compute_busy / m.makespan;
    assert!(mean(&pipe) > mean(&seq));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn costs(s: f64, r: f64) -> PhaseCost {
        PhaseCost {
            sim_base: s,
            sim_per_env: 0.0,
            render_base: r,
            render_per_env: 0.0,
            ..PhaseCost::default()
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn datagen_matches_pipeline_closed_form(
            s in 0.05f64..3.0, r in 0.05f64..3.0, k in 1usize..30,
        ) {
            let c = costs(s, r);
            let (seq, _) = datagen(c, k, 1, DatagenMode::Sequential);
            let (pipe, tb) = datagen(c, k, 1, DatagenMode::Pipelined);
            prop_assert!((seq.makespan - k as f64 * (s + r)).abs() < 1e-6);
            prop_assert!((pipe.makespan - pipeline_oracle(s, r, k)).abs() < 1e-6);
            prop_assert!(pipe.makespan + 1e-9 >= (k as f64 * s).max(k as f64 * r));
            prop_assert!(pipe.makespan <= seq.makespan + 1e-9);
            let speedup = seq.makespan / pipe.makespan;
            prop_assert!((1.0 - 1e-9..=2.0 + 1e-9).contains(&speedup));
            prop_assert!(audit_device(&tb.dev).is_ok());
        }

        #[test]
        fn rollout_matches_list_schedule(
            sb in 0.0f64..0.5, sp in 0.0f64..0.02,
            rb in 0.0f64..0.5, rp in 0.0f64..0.02,
            ip in 0.0f64..0.02,
            groups in prop::sample::select(vec![1u32, 2, 4]),
            scale in 1u32..16,
            horizon in 1usize..8,
        ) {
            let c = PhaseCost {
                sim_base: sb + 0.01, sim_per_env: sp,
                render_base: rb + 0.01, render_per_env: rp,
                inference_base: 0.0, inference_per_env: ip,
                ..PhaseCost::default()
            };
            let batch = groups * scale * 4;
            let (m, tb) = rollout(c, horizon, batch, groups, RolloutMode::Interleaved);
            let expect = rollout_oracle(&c, horizon, batch, groups);
            prop_assert!((m.makespan - expect).abs() < 1e-6, "{} vs {}", m.makespan, expect);
            let (seq, _) = rollout(c, horizon, batch, 1, RolloutMode::Sequential);
            let seq_expect = horizon as f64 * (c.inference(batch) + c.sim(batch) + c.render(batch));
            prop_assert!((seq.makespan - seq_expect).abs() < 1e-6);
            prop_assert!(audit_device(&tb.dev).is_ok());
        }
    }
}
