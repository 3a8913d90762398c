use tsgsim_core::audit::audit_device;
use tsgsim_core::{
    ChannelError, ContextId, ContextKind, Device, DeviceConfig, EventKind, FaultKind, GpuCommand,
    Knobs, SizeClass, StreamId, VirtAddr,
};

struct Rig {
    dev: Device,
    cu: ContextId,
    gfx: ContextId,
    sim: StreamId,
    render: StreamId,
}

fn rig_with(cfg: DeviceConfig, pool: u32) -> Rig {
    let mut dev = Device::new(cfg).unwrap();
    let cu = dev.create_context(ContextKind::Compute).unwrap();
    let gfx = dev.create_context(ContextKind::Graphics).unwrap();
    dev.provision_forwarding_pool(gfx, pool).unwrap();
    let sim = dev.create_stream(cu).unwrap();
    let render = dev.create_stream(gfx).unwrap();
    Rig {
        dev,
        cu,
        gfx,
        sim,
        render,
    }
}

fn rig() -> Rig {
    rig_with(DeviceConfig::default(), 4)
}

fn buffer(dev: &mut Device, ctx: ContextId) -> VirtAddr {
    let space = dev.context(ctx).unwrap().address_space();
    dev.map_fresh(space, 1, SizeClass::Big).unwrap()
}

fn tsg_of(dev: &Device, ctx: ContextId) -> u32 {
    dev.context(ctx).unwrap().tsg_id().0
}

#[test]
fn contexts_differ_in_fixed_function_state() {
    let r = rig();
    assert!(!r.dev.context(r.cu).unwrap().fixed_function_ready());
    assert!(r.dev.context(r.gfx).unwrap().fixed_function_ready());
    assert_ne!(tsg_of(&r.dev, r.cu), tsg_of(&r.dev, r.gfx));
    assert_eq!(r.dev.runlist().len(), 2);
}

#[test]
fn forwarding_pool_is_clamped_and_hidden() {
    let mut dev = Device::new(DeviceConfig::default()).unwrap();
    let g = dev.create_context(ContextKind::Graphics).unwrap();
    let pool = dev.provision_forwarding_pool(g, 4).unwrap();
    assert_eq!(pool.len(), 4);
    let gtsg = dev.context(g).unwrap().tsg_id();
    assert!(pool.iter().all(|&c| dev.channel(c).unwrap().tsg_id() == gtsg));

    let g2 = dev.create_context(ContextKind::Graphics).unwrap();
    assert_eq!(dev.provision_forwarding_pool(g2, 64).unwrap().len(), 7);
    let ctx = dev.context(g2).unwrap();
    let visible = ctx
        .channels()
        .iter()
        .filter(|&&c| dev.channel(c).unwrap().visible_to_app())
        .count();
    assert_eq!(visible, 1);

    let c = dev.create_context(ContextKind::Compute).unwrap();
    assert!(matches!(
        dev.provision_forwarding_pool(c, 1),
        Err(ChannelError::WrongContextKind { .. })
    ));
}

#[test]
fn first_submit_advances_put_and_marks_pending() {
    let mut r = rig();
    let ch = r.dev.stream(r.sim).unwrap().channel_ref();
    assert_eq!(r.dev.channel(ch).unwrap().userd().put, 0);
    r.dev.submit(r.sim, vec![GpuCommand::kernel(1.0, 0.1, vec![])]).unwrap();
    let c = r.dev.channel(ch).unwrap();
    assert_eq!(c.userd().put, 1);
    assert_eq!(c.outstanding().len(), 1);
    assert!(c.pending());
    // kernel plus the trailing semaphore
    assert_eq!(c.outstanding()[0].length, 2);
}

#[test]
fn full_ring_is_reported() {
    let cfg = DeviceConfig {
        ring_capacity: 2,
        ..DeviceConfig::default()
    };
    let mut r = rig_with(cfg, 1);
    let k = || vec![GpuCommand::kernel(1.0, 0.1, vec![])];
    r.dev.submit(r.sim, k()).unwrap();
    r.dev.submit(r.sim, k()).unwrap();
    let ch = r.dev.stream(r.sim).unwrap().channel_ref();
    assert_eq!(r.dev.submit(r.sim, k()), Err(ChannelError::RingFull(ch)));
    r.dev.run_until_idle();
    r.dev.submit(r.sim, k()).unwrap();
}

#[test]
fn doorbell_wakes_only_the_owning_channel() {
    let mut r = rig();
    r.dev.submit(r.sim, vec![GpuCommand::sleep(1.0)]).unwrap();
    let pending: Vec<_> = (0..8)
        .filter_map(|i| r.dev.channel(tsgsim_core::ChannelId(i)).ok())
        .filter(|c| c.pending())
        .map(|c| c.id())
        .collect();
    assert_eq!(pending, vec![r.dev.stream(r.sim).unwrap().channel_ref()]);
}

#[test]
fn bind_swaps_token_and_grafts_once() {
    let mut r = rig();
    let orig = r.dev.submission_state(r.sim).unwrap();
    r.dev.bind(r.sim, r.gfx).unwrap();
    let s = r.dev.stream(r.sim).unwrap();
    let fwd = r.dev.channel(s.channel_ref()).unwrap();
    assert_eq!(s.token(), fwd.token());
    assert_eq!(fwd.context_id(), r.gfx);
    assert_eq!(s.saved_snapshot(), Some(orig));
    assert!(r.dev.graft_report(r.cu, r.gfx).is_some());
    assert_eq!(r.dev.graft_reports(), 1);

    // a second stream of the same pair does not graft again
    let s2 = r.dev.create_stream(r.cu).unwrap();
    r.dev.bind(s2, r.gfx).unwrap();
    assert_eq!(r.dev.graft_reports(), 1);
    assert_eq!(r.dev.bind(s2, r.gfx), Err(ChannelError::AlreadyBound(s2)));
}

#[test]
fn submit_after_bind_lands_in_forwarding_ring() {
    let mut r = rig();
    let orig = r.dev.stream(r.sim).unwrap().channel_ref();
    r.dev.bind(r.sim, r.gfx).unwrap();
    r.dev.submit(r.sim, vec![GpuCommand::sleep(1.0)]).unwrap();
    let fwd = r.dev.stream(r.sim).unwrap().channel_ref();
    assert_eq!(r.dev.channel(orig).unwrap().userd().put, 0);
    // bootstrap entry plus our buffer
    assert_eq!(r.dev.channel(fwd).unwrap().userd().put, 2);
}

#[test]
fn pool_exhaustion_and_unbind_errors() {
    let mut r = rig_with(DeviceConfig::default(), 1);
    let s2 = r.dev.create_stream(r.cu).unwrap();
    r.dev.bind(r.sim, r.gfx).unwrap();
    assert_eq!(r.dev.bind(s2, r.gfx), Err(ChannelError::PoolExhausted(r.gfx)));
    assert_eq!(r.dev.unbind(s2), Err(ChannelError::NotBound(s2)));
    assert!(matches!(
        r.dev.bind(r.render, r.gfx),
        Err(ChannelError::WrongContextKind { .. })
    ));
}

#[test]
fn bind_unbind_round_trip_restores_state() {
    let mut r = rig();
    let buf = buffer(&mut r.dev, r.cu);
    r.dev.submit(r.sim, vec![GpuCommand::kernel(0.5, 0.1, vec![buf])]).unwrap();
    r.dev.bind(r.sim, r.gfx).unwrap();
    let saved = r.dev.stream(r.sim).unwrap().saved_snapshot().unwrap();
    assert_ne!(r.dev.submission_state(r.sim).unwrap(), saved);
    r.dev.submit(r.sim, vec![GpuCommand::kernel(0.5, 0.1, vec![buf])]).unwrap();
    r.dev.unbind(r.sim).unwrap();
    assert_eq!(r.dev.submission_state(r.sim).unwrap(), saved);
    assert_eq!(saved.userd.get, saved.userd.put);
    assert!(r.dev.stream(r.sim).unwrap().saved_snapshot().is_none());
}

#[test]
fn repeated_bind_cycles_leak_nothing() {
    let mut r = rig_with(DeviceConfig::default(), 2);
    let buf = buffer(&mut r.dev, r.cu);
    let channels = r.dev.context(r.gfx).unwrap().channels().len();
    for _ in 0..100 {
        r.dev.bind(r.sim, r.gfx).unwrap();
        r.dev.submit(r.sim, vec![GpuCommand::kernel(0.01, 0.1, vec![buf])]).unwrap();
        r.dev.unbind(r.sim).unwrap();
    }
    let g = r.dev.context(r.gfx).unwrap();
    assert_eq!(g.free_pool().len(), 2);
    assert_eq!(g.channels().len(), channels);
    assert_eq!(r.dev.graft_reports(), 1);
    assert_eq!(r.dev.semaphore_value(r.sim), 100);
    assert!(r.dev.faults().is_empty());
    // always the lowest free channel, so only one ever needed bootstrapping
    let boots = r
        .dev
        .events()
        .iter()
        .filter(|e| e.event == EventKind::Bootstrap)
        .count();
    assert_eq!(boots, 1);
}

#[test]
fn unbound_kernel_runs_in_compute_slice_and_bound_in_graphics_slice() {
    let mut r = rig();
    let buf = buffer(&mut r.dev, r.cu);
    let k = || vec![GpuCommand::kernel(1.0, 0.1, vec![buf])];
    r.dev.bind(r.sim, r.gfx).unwrap();
    r.dev.submit(r.sim, k()).unwrap();
    r.dev.unbind(r.sim).unwrap();
    r.dev.submit(r.sim, k()).unwrap();
    r.dev.run_until_idle();
    let kernels: Vec<_> = r
        .dev
        .exec_records()
        .iter()
        .filter(|e| e.kind == "kernel")
        .collect();
    assert_eq!(kernels.len(), 2);
    assert_eq!(kernels[0].tsg.0, tsg_of(&r.dev, r.gfx));
    assert_eq!(kernels[1].tsg.0, tsg_of(&r.dev, r.cu));
    audit_device(&r.dev).unwrap();
}

#[test]
fn micro_ops_per_submit_do_not_change_when_bound() {
    let mut r = rig();
    let per_submit = |dev: &mut Device, s| {
        let before = dev.micro_ops();
        dev.submit(s, vec![GpuCommand::sleep(0.1)]).unwrap();
        dev.micro_ops() - before
    };
    let unbound = per_submit(&mut r.dev, r.sim);
    r.dev.bind(r.sim, r.gfx).unwrap();
    let bound = per_submit(&mut r.dev, r.sim);
    assert_eq!(unbound, 4);
    assert_eq!(bound, unbound);
}

#[test]
fn semaphores_land_at_the_compute_sync_region() {
    let mut r = rig();
    let buf = buffer(&mut r.dev, r.cu);
    let mut seen = Vec::new();
    for i in 0..6 {
        if i == 3 {
            r.dev.bind(r.sim, r.gfx).unwrap();
        }
        let v = r.dev.submit(r.sim, vec![GpuCommand::kernel(0.3, 0.1, vec![buf])]).unwrap();
        r.dev.run_until_idle();
        assert_eq!(r.dev.semaphore_value(r.sim), v);
        seen.push(v);
    }
    assert!(seen.windows(2).all(|w| w[0] < w[1]));
    let sync = r.dev.stream(r.sim).unwrap().sync_region().0;
    let sems: Vec<_> = r
        .dev
        .events()
        .iter()
        .filter(|e| e.event == EventKind::Semaphore && e.stream == Some(r.sim.0))
        .collect();
    assert_eq!(sems.len(), 6);
    assert!(sems.iter().all(|e| e.vaddr == Some(sync)));
}

#[test]
fn missing_bootstrap_faults_the_first_kernel() {
    let mut r = rig();
    r.dev.set_knobs(Knobs {
        bootstrap_on_bind: false,
        ..Knobs::default()
    });
    let buf = buffer(&mut r.dev, r.cu);
    r.dev.bind(r.sim, r.gfx).unwrap();
    r.dev.submit(r.sim, vec![GpuCommand::kernel(1.0, 0.1, vec![buf])]).unwrap();
    r.dev.run_until_idle();
    assert_eq!(r.dev.faults().len(), 1);
    assert_eq!(r.dev.faults()[0].kind, FaultKind::ExecutionFault);
    assert_eq!(r.dev.semaphore_value(r.sim), 0);

    // explicit bootstrap after a reset lets kernels run
    let fwd = r.dev.stream(r.sim).unwrap().channel_ref();
    r.dev.reset_channel(fwd).unwrap();
    let cfg = r.dev.context(r.cu).unwrap().compute_config();
    r.dev.bootstrap(fwd, cfg, "manual").unwrap();
    let v = r.dev.submit(r.sim, vec![GpuCommand::kernel(1.0, 0.1, vec![buf])]).unwrap();
    r.dev.run_until_idle();
    assert_eq!(r.dev.semaphore_value(r.sim), v);
    assert_eq!(r.dev.faults().len(), 1);
}

#[test]
fn missing_graft_page_faults_at_the_touched_address() {
    let mut r = rig();
    r.dev.set_knobs(Knobs {
        graft_on_bind: false,
        ..Knobs::default()
    });
    let buf = buffer(&mut r.dev, r.cu);
    r.dev.bind(r.sim, r.gfx).unwrap();
    r.dev.submit(r.sim, vec![GpuCommand::kernel(1.0, 0.1, vec![buf])]).unwrap();
    r.dev.run_until_idle();
    let f = &r.dev.faults()[0];
    assert_eq!(f.kind, FaultKind::PageFault);
    assert_eq!(f.vaddr, Some(buf));
    // a waiting host notices the stall instead of spinning
    assert!(matches!(r.dev.unbind(r.sim), Err(ChannelError::Stalled { .. })));
}

#[test]
fn draw_on_compute_context_is_an_execution_fault() {
    let mut r = rig();
    r.dev.submit(r.sim, vec![GpuCommand::draw(1.0, 0.6, 1.0, vec![])]).unwrap();
    r.dev.run_until_idle();
    assert_eq!(r.dev.faults()[0].kind, FaultKind::ExecutionFault);
}

#[test]
fn growing_local_memory_resubmits_to_bound_channels() {
    let mut r = rig();
    let s2 = r.dev.create_stream(r.cu).unwrap();
    let s3 = r.dev.create_stream(r.cu).unwrap();
    r.dev.bind(r.sim, r.gfx).unwrap();
    r.dev.bind(s2, r.gfx).unwrap();
    let _ = s3;
    let cur = r.dev.context(r.cu).unwrap().compute_config().local_memory_bytes;
    assert_eq!(r.dev.set_local_memory(r.cu, cur + 4096).unwrap(), 2);
    let resubmits = r
        .dev
        .events()
        .iter()
        .filter(|e| e.event == EventKind::Bootstrap && e.detail.as_deref() == Some("resubmit"))
        .count();
    assert_eq!(resubmits, 2);
    r.dev.run_until_idle();
    let fwd = r.dev.stream(s2).unwrap().channel_ref();
    assert_eq!(
        r.dev.channel(fwd).unwrap().compute_config().unwrap().local_memory_bytes,
        cur + 4096
    );
    // shrinking re-submits nothing
    assert_eq!(r.dev.set_local_memory(r.cu, 0).unwrap(), 0);
}

fn finish_times(dev: &Device) -> Vec<(u32, f64, f64)> {
    dev.exec_records()
        .iter()
        .filter(|e| e.start < e.end)
        .map(|e| (e.channel.0, e.start, e.end))
        .collect()
}

#[test]
fn two_tsgs_alternate_without_overlap() {
    let cfg = DeviceConfig {
        quantum: 0.5,
        ..DeviceConfig::default()
    };
    let mut r = rig_with(cfg, 1);
    r.dev.submit(r.sim, vec![GpuCommand::kernel(1.0, 0.5, vec![])]).unwrap();
    r.dev.submit(r.render, vec![GpuCommand::draw(1.0, 0.5, 1.0, vec![])]).unwrap();
    let s = r.dev.run_until_idle();
    assert!((s.makespan - 2.0).abs() < 1e-9);
    let t = finish_times(&r.dev);
    assert_eq!(t.len(), 2);
    assert!((t[0].2 - 1.0).abs() < 1e-9 && (t[1].1 - 1.0).abs() < 1e-9);
    let slices = r.dev.slices();
    assert!(slices.windows(2).all(|w| w[0].end <= w[1].start + 1e-9));
    audit_device(&r.dev).unwrap();
}

#[test]
fn switch_penalty_delays_the_next_tsg() {
    let cfg = DeviceConfig {
        quantum: 0.5,
        switch_penalty: 0.25,
        ..DeviceConfig::default()
    };
    let mut r = rig_with(cfg, 1);
    r.dev.submit(r.sim, vec![GpuCommand::kernel(1.0, 0.5, vec![])]).unwrap();
    r.dev.submit(r.render, vec![GpuCommand::draw(1.0, 0.5, 1.0, vec![])]).unwrap();
    let s = r.dev.run_until_idle();
    assert!((s.makespan - 2.25).abs() < 1e-9);
    assert_eq!(s.tsg_switches, 1);
    audit_device(&r.dev).unwrap();
}

fn two_channels(frac: f64) -> Device {
    let mut dev = Device::new(DeviceConfig::default()).unwrap();
    let cu = dev.create_context(ContextKind::Compute).unwrap();
    let a = dev.create_stream(cu).unwrap();
    let b = dev.create_stream(cu).unwrap();
    dev.submit(a, vec![GpuCommand::kernel(1.0, frac, vec![])]).unwrap();
    dev.submit(b, vec![GpuCommand::kernel(1.0, frac, vec![])]).unwrap();
    dev.run_until_idle();
    dev
}

#[test]
fn concurrent_channels_share_without_oversubscription() {
    let dev = two_channels(0.4);
    let t = finish_times(&dev);
    assert!(t.iter().all(|&(_, s, e)| s == 0.0 && (e - 1.0).abs() < 1e-9));
}

#[test]
fn oversubscribed_channels_stretch() {
    let dev = two_channels(0.8);
    let t = finish_times(&dev);
    assert!(t.iter().all(|&(_, _, e)| (e - 1.6).abs() < 1e-9));
    let s = dev.summary();
    assert!((s.compute_busy - 1.6).abs() < 1e-9);
}

#[test]
fn idle_engine_samples_zero() {
    let dev = Device::new(DeviceConfig::default()).unwrap();
    let samples = dev.sample_utilization(0.5, 3.0);
    assert_eq!(samples.len(), 6);
    assert!(samples
        .iter()
        .all(|s| s.compute_util == 0.0 && s.graphics_util == 0.0 && s.active_tsg.is_none()));
}

#[test]
fn samples_average_over_intervals() {
    let dev = two_channels(0.8);
    let s = dev.sample_utilization(1.0, 2.0);
    assert!((s[0].compute_util - 1.0).abs() < 1e-9);
    assert!((s[1].compute_util - 0.6).abs() < 1e-9);
    assert_eq!(s[0].active_tsg, Some(0));
}

#[test]
fn run_for_advances_an_idle_clock() {
    let mut dev = Device::new(DeviceConfig::default()).unwrap();
    dev.run_for(2.5);
    assert_eq!(dev.now(), 2.5);
    let cu = dev.create_context(ContextKind::Compute).unwrap();
    let s = dev.create_stream(cu).unwrap();
    dev.submit(s, vec![GpuCommand::sleep(1.0)]).unwrap();
    dev.run_for(0.4);
    assert_eq!(dev.semaphore_value(s), 0);
    dev.run_for(0.6);
    assert_eq!(dev.semaphore_value(s), 1);
    assert!((dev.now() - 3.5).abs() < 1e-9);
}

#[test]
fn event_logs_are_identical_across_reruns() {
    let run = || {
        let mut r = rig();
        let buf = buffer(&mut r.dev, r.cu);
        r.dev.bind(r.sim, r.gfx).unwrap();
        for _ in 0..5 {
            r.dev.submit(r.sim, vec![GpuCommand::kernel(0.7, 0.3, vec![buf])]).unwrap();
            r.dev.submit(r.render, vec![GpuCommand::draw(0.5, 0.6, 1.0, vec![])]).unwrap();
        }
        r.dev.run_until_idle();
        tsgsim_core::event::to_json_lines(r.dev.events())
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    /// Fluid processor-sharing schedule of commands that all start at 0
    /// on separate channels of one TSG. Returns finish times.
    fn ps_oracle(cmds: &[(f64, f64)]) -> Vec<f64> {
        let mut left: Vec<f64> = cmds.iter().map(|c| c.0).collect();
        let mut done = vec![f64::NAN; cmds.len()];
        let mut t = 0.0;
        loop {
            let live: Vec<usize> = (0..cmds.len()).filter(|&i| done[i].is_nan()).collect();
            if live.is_empty() {
                return done;
            }
            let demand: f64 = live.iter().map(|&i| cmds[i].1).sum();
            let slow = demand.max(1.0);
            let rate = |i: usize| if cmds[i].1 > 0.0 { 1.0 / slow } else { 1.0 };
            let dt = live
                .iter()
                .map(|&i| left[i] / rate(i))
                .fold(f64::INFINITY, f64::min);
            t += dt;
            for &i in &live {
                left[i] -= dt * rate(i);
                if left[i] <= 1e-9 {
                    done[i] = t;
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn processor_sharing_matches_fluid_oracle(
            cmds in prop::collection::vec((0.05f64..3.0, 0.0f64..1.0), 1..5)
        ) {
            let mut dev = Device::new(DeviceConfig::default()).unwrap();
            let cu = dev.create_context(ContextKind::Compute).unwrap();
            for &(d, c) in &cmds {
                let s = dev.create_stream(cu).unwrap();
                dev.submit(s, vec![GpuCommand::kernel(d, c, vec![])]).unwrap();
            }
            let sum = dev.run_until_idle();
            let expect = ps_oracle(&cmds);
            let mut got: Vec<(u32, f64)> = finish_times(&dev).iter().map(|&(ch, _, e)| (ch, e)).collect();
            got.sort_by_key(|g| g.0);
            for (g, e) in got.iter().zip(&expect) {
                prop_assert!((g.1 - e).abs() < 1e-6, "{} vs {}", g.1, e);
            }
            // work conservation
            let work: f64 = cmds.iter().map(|c| c.0 * c.1).sum();
            let longest = cmds.iter().map(|c| c.0).fold(0.0, f64::max);
            prop_assert!(sum.makespan + 1e-9 >= work.max(longest));
            prop_assert!(sum.compute_busy <= sum.makespan + 1e-9);
            prop_assert!((sum.compute_busy - work).abs() < 1e-6);
        }

        #[test]
        fn mixed_tsg_traces_pass_audits(
            ops in prop::collection::vec((0usize..3, 0.0f64..1.5, 0.0f64..1.0), 1..40),
            quantum in 0.05f64..1.0,
        ) {
            let cfg = DeviceConfig { quantum, ..DeviceConfig::default() };
            let mut r = rig_with(cfg, 2);
            let extra = r.dev.create_stream(r.cu).unwrap();
            for &(which, d, f) in &ops {
                let (s, cmd) = match which {
                    0 => (r.sim, GpuCommand::kernel(d, f, vec![])),
                    1 => (extra, GpuCommand::kernel(d, f, vec![])),
                    _ => (r.render, GpuCommand::draw(d, f, 1.0, vec![])),
                };
                if r.dev.submit(s, vec![cmd]).is_err() {
                    r.dev.run_until_idle();
                }
                if which == 1 && d < 0.3 {
                    r.dev.run_for(d);
                }
            }
            let sum = r.dev.run_until_idle();
            prop_assert!(audit_device(&r.dev).is_ok(), "{:?}", audit_device(&r.dev));
            prop_assert!(sum.compute_busy <= sum.makespan + 1e-9);
            prop_assert!(sum.graphics_busy <= sum.makespan + 1e-9);
            prop_assert!(r.dev.faults().is_empty());
        }
    }
}
