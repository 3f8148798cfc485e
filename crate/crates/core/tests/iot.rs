use std::time::Instant;

use homefl::data::ActivityLabel;
use homefl::iot::auth::{AuthDecision, AuthRegistry, DenyReason, Token};
use homefl::iot::devices::{default_rules, DeviceId, HomeState};
use homefl::iot::pipeline::{
    run_pipeline, ActivityInput, ControlPath, Home, Jitter, LatencyProfile, Outcome, Stage, VirtualClock,
};
use homefl::iot::scaling::{scaling_model, ScalingCalibration};
use homefl::iot::{run_latency, IotConfig};
use homefl::seed;
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn stage_sum_us(stages: &[u64; 5]) -> u64 {
    stages.iter().sum()
}

#[test]
fn default_breakdown_totals_are_exact() {
    let start = Instant::now();
    let report = run_latency(&IotConfig::default()).unwrap();
    assert!(start.elapsed().as_secs_f64() < 1.0);
    let totals: Vec<u64> = report.breakdown.iter().map(|t| t.total_us()).collect();
    assert_eq!(totals, [810_000, 3_090_000, 1_570_000, 1_580_000, 14_050_000]);
    for t in &report.breakdown {
        assert_eq!(stage_sum_us(&t.stages_us), t.total_us());
        assert_eq!(t.finished_us - t.started_us, t.total_us());
        assert!((Stage::ALL.iter().map(|s| t.stage_seconds(*s)).sum::<f64>() - t.total_seconds()).abs() < 1e-9);
        assert_eq!(t.outcome, Outcome::Dispatched);
    }
}

#[test]
fn default_reading_paths_are_ordered() {
    let report = run_latency(&IotConfig::default()).unwrap();
    let totals: Vec<u64> = report.comparison.iter().map(|t| t.total_us()).collect();
    assert_eq!(totals, [810_000, 3_670_000, 4_270_000, 4_610_000]);
    assert!(totals.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn local_path_skips_remote_stages() {
    let report = run_latency(&IotConfig::default()).unwrap();
    let local = &report.comparison[0];
    assert_eq!(local.path, ControlPath::LocalFl);
    assert_eq!(local.stages_us[Stage::Transfer.index()], 0);
    assert_eq!(local.stages_us[Stage::Message.index()], 0);
    let remote = &report.comparison[2];
    assert_eq!(remote.stages_us[Stage::Transfer.index()], 640_000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn path_ordering_survives_ten_percent_perturbation(
        f_transfer in 0.9f64..=1.1,
        f_message in 0.9f64..=1.1,
        f_react in 0.9f64..=1.1,
    ) {
        let mut cfg = IotConfig::default();
        for p in cfg.profiles.iter_mut().filter(|p| p.path.is_remote()) {
            let s = &mut p.stages;
            s.t_transfer = s.t_transfer.map(|v| v * f_transfer);
            s.t_message = s.t_message.map(|v| v * f_message);
            s.t_react *= f_react;
        }
        let report = run_latency(&cfg).unwrap();
        let totals: Vec<u64> = report.comparison.iter().map(|t| t.total_us()).collect();
        prop_assert!(totals.windows(2).all(|w| w[0] < w[1]), "{:?}", totals);
    }
}

#[test]
fn scaling_anchors_and_fl_below_cl() {
    let c = ScalingCalibration::default();
    assert_eq!(scaling_model(ControlPath::LocalFl, 10, &c).unwrap(), 0.4);
    assert_eq!(scaling_model(ControlPath::LocalFl, 100, &c).unwrap(), 4.8);
    assert_eq!(scaling_model(ControlPath::RemoteCl, 10, &c).unwrap(), 1.1);
    assert_eq!(scaling_model(ControlPath::RemoteCl, 100, &c).unwrap(), 9.5);
    let mut prev = (0.0, 0.0);
    for n in 1..=100 {
        let fl = scaling_model(ControlPath::LocalFl, n, &c).unwrap();
        let cl = scaling_model(ControlPath::RemoteCl, n, &c).unwrap();
        assert!(fl > 0.0 && fl < cl, "n = {n}: {fl} vs {cl}");
        assert!(fl > prev.0 && cl > prev.1);
        prev = (fl, cl);
    }
    assert!(scaling_model(ControlPath::LocalFl, 0, &c).is_err());
    assert!(scaling_model(ControlPath::RemoteClIfttt, 5, &c).is_err());
}

#[test]
fn zero_profile_takes_no_time() {
    let cfg = IotConfig::default();
    for path in ControlPath::ALL {
        let mut state = HomeState::default();
        let mut clock = VirtualClock::new();
        let input = ActivityInput {
            activity: ActivityLabel::Reading,
            confidence: 1.0,
            user: cfg.harness.user.clone(),
            token: cfg.harness.token.clone(),
        };
        let trace = run_pipeline::<ChaCha8Rng>(
            &input,
            path,
            &LatencyProfile::zero(path),
            Home {
                registry: &cfg.users,
                rules: &cfg.rules,
                state: &mut state,
                clock: &mut clock,
            },
            None,
        )
        .unwrap();
        assert_eq!(trace.total_us(), 0);
        assert_eq!(clock.now_us(), 0);
        assert!(state.light.on);
    }
}

fn run_with(
    registry: &AuthRegistry,
    activity: ActivityLabel,
    user: &str,
    token: &Token,
    confidence: f64,
    state: &mut HomeState,
) -> Outcome {
    let mut clock = VirtualClock::new();
    let rules = default_rules();
    run_pipeline::<ChaCha8Rng>(
        &ActivityInput {
            activity,
            confidence,
            user: user.into(),
            token: token.clone(),
        },
        ControlPath::LocalFl,
        &LatencyProfile::zero(ControlPath::LocalFl),
        Home {
            registry,
            rules: &rules,
            state,
            clock: &mut clock,
        },
        None,
    )
    .unwrap()
    .outcome
}

#[test]
fn authentication_denies_by_default() {
    let mut rng = seed::rng(1);
    let alice = Token::random(&mut rng);
    let guest = Token::random(&mut rng);
    let mut reg = AuthRegistry::new();
    reg.register("alice", alice.clone(), [DeviceId::SmartLight, DeviceId::LocalDatabase, DeviceId::SmartSpeaker]);
    reg.register("guest", guest.clone(), [DeviceId::SmartLight]);

    assert_eq!(reg.authenticate("alice", DeviceId::SmartLight, &alice), AuthDecision::Allow);
    assert_eq!(
        reg.authenticate("mallory", DeviceId::SmartLight, &alice),
        AuthDecision::Deny(DenyReason::UnknownUser)
    );
    assert_eq!(
        reg.authenticate("alice", DeviceId::SmartLight, &guest),
        AuthDecision::Deny(DenyReason::BadToken)
    );
    assert_eq!(
        reg.authenticate("guest", DeviceId::WifiRouter, &guest),
        AuthDecision::Deny(DenyReason::NoPermission)
    );
    assert_eq!(
        AuthRegistry::new().authenticate("alice", DeviceId::SmartLight, &alice),
        AuthDecision::Deny(DenyReason::UnknownUser)
    );

    let mut state = HomeState::default();
    // Guest may use the light but not the speaker or database, so nothing changes.
    let out = run_with(&reg, ActivityLabel::DrinkingWater, "guest", &guest, 1.0, &mut state);
    assert_eq!(out, Outcome::Denied(DenyReason::NoPermission));
    assert_eq!(state, HomeState::default());

    let out = run_with(&reg, ActivityLabel::Reading, "alice", &alice, 0.59, &mut state);
    assert_eq!(out, Outcome::LowConfidence);
    assert!(!state.light.on);
}

#[test]
fn drinking_water_records_intake_and_notifies() {
    let mut rng = seed::rng(2);
    let token = Token::random(&mut rng);
    let mut reg = AuthRegistry::new();
    reg.register("alice", token.clone(), [DeviceId::LocalDatabase, DeviceId::SmartSpeaker]);
    let mut state = HomeState::default();
    let out = run_with(&reg, ActivityLabel::DrinkingWater, "alice", &token, 0.9, &mut state);
    assert_eq!(out, Outcome::Dispatched);
    assert_eq!(state.intake_log.len(), 1);
    assert_eq!(state.intake_log[0].user, "alice");
    assert_eq!(state.speaker.notifications.len(), 1);
}

#[test]
fn jitter_is_seeded() {
    let cfg = IotConfig::default();
    let mut profile = *cfg.profile(ControlPath::RemoteCl, ActivityLabel::Reading).unwrap();
    profile.jitter_std = Some(Jitter {
        t_transfer: 0.1,
        t_react: 0.2,
        ..Jitter::default()
    });
    let run = |s: u64| {
        let mut state = HomeState::default();
        let mut clock = VirtualClock::new();
        let mut rng = seed::rng(s);
        run_pipeline(
            &ActivityInput {
                activity: ActivityLabel::Reading,
                confidence: 1.0,
                user: cfg.harness.user.clone(),
                token: cfg.harness.token.clone(),
            },
            ControlPath::RemoteCl,
            &profile,
            Home {
                registry: &cfg.users,
                rules: &cfg.rules,
                state: &mut state,
                clock: &mut clock,
            },
            Some(&mut rng),
        )
        .unwrap()
        .stages_us
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
    let a = run(5);
    assert_eq!(a[Stage::Capture.index()], 370_000);
    assert_eq!(a[Stage::Detect.index()], 380_000);

    let mut cfg_j = cfg.clone();
    for p in &mut cfg_j.profiles {
        p.stages.jitter_std = Some(Jitter { t_react: 0.05, ..Jitter::default() });
    }
    let r1 = run_latency(&cfg_j).unwrap();
    let r2 = run_latency(&cfg_j).unwrap();
    let totals = |r: &homefl::iot::LatencyReport| r.breakdown.iter().map(|t| t.total_us()).collect::<Vec<_>>();
    assert_eq!(totals(&r1), totals(&r2));
}

#[test]
fn remote_profile_without_transfer_is_a_config_error() {
    let mut p = LatencyProfile::new(0.1, None, 0.1, Some(0.1), 0.1);
    let err = p.validate_for(ControlPath::RemoteCl).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("t_transfer"));
    p.t_transfer = Some(0.2);
    p.validate_for(ControlPath::RemoteCl).unwrap();
    assert!(p.validate_for(ControlPath::LocalFl).is_err());
}
