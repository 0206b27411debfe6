mod common;

use qplan::engine::{EngineConfig, EngineKind, EpisodeLog};
use qplan::live::{rerun, ClientCommand, LiveSession, ReplayCursor, ScenarioRef, StateFrame};
use qplan::scenario::Scenario;

fn session(scenario: Scenario, engine: EngineKind) -> LiveSession<qplan::denoiser::MlpDenoiser> {
    LiveSession::new(
        common::tiny_model(),
        scenario,
        engine,
        EngineConfig::default(),
        11,
    )
    .unwrap()
}

/// A scripted steering session: obstacle drags, η changes, a pause and a
/// reset, interleaved with ticks.
fn scripted(engine: EngineKind) -> (LiveSession<qplan::denoiser::MlpDenoiser>, Vec<StateFrame>) {
    let mut s = session(Scenario::static_block(), engine);
    let id = s.world().obstacles[0].id;
    let mut frames = Vec::new();
    for step in 0..60u32 {
        let mut commands = Vec::new();
        match step {
            5 => commands.push(ClientCommand::SetEta { eta: 2.0 }),
            10..=20 => commands.push(ClientCommand::SetObstacle {
                id,
                center: vec![-0.5 + 0.05 * f64::from(step - 10), 0.3],
                radius: None,
            }),
            25 => commands.push(ClientCommand::AddObstacle {
                center: vec![0.5, -0.5],
                radius: 0.15,
                id: None,
            }),
            30 => commands.push(ClientCommand::Pause),
            33 => commands.push(ClientCommand::Resume),
            35 => commands.push(ClientCommand::RemoveObstacle { id }),
            40 => commands.push(ClientCommand::Reset {
                scenario: Some(ScenarioRef::Name("dynamic".into())),
                seed: Some(2),
            }),
            45 => commands.push(ClientCommand::SetEta { eta: 0.0 }),
            _ => {}
        }
        let (errors, frame) = s.tick_with(commands);
        assert!(errors.is_empty(), "{errors:?}");
        frames.extend(frame.unwrap());
    }
    (s, frames)
}

/// Drops the wall-clock fields, which legitimately differ between runs.
fn untimed(mut log: EpisodeLog) -> EpisodeLog {
    for t in &mut log.ticks {
        t.planner.plan_ms = 0.0;
        t.planner.exec_ms = 0.0;
    }
    log
}

#[test]
fn recorded_commands_reproduce_the_session_exactly() {
    for engine in [EngineKind::Queue, EngineKind::Baseline] {
        let (live, frames) = scripted(engine);
        assert!(frames.len() > 40);
        let (again, replayed) = rerun(
            common::tiny_model(),
            Scenario::static_block(),
            engine,
            EngineConfig::default(),
            11,
            live.recorded(),
            live.steps(),
        )
        .unwrap();
        assert_eq!(replayed, frames, "{engine}");
        assert_eq!(again.recorded(), live.recorded());
        assert_eq!(untimed(again.to_log()), untimed(live.to_log()));
    }
}

#[test]
fn commands_take_effect_on_the_next_tick() {
    let mut s = session(Scenario::static_block(), EngineKind::Queue);
    let id = s.world().obstacles[0].id;
    let (_, f) = s.tick_with([
        ClientCommand::SetObstacle {
            id,
            center: vec![0.25, 0.5],
            radius: Some(0.3),
        },
        ClientCommand::SetEta { eta: 1.25 },
    ]);
    let f = f.unwrap().unwrap();
    assert_eq!(f.tick, 0);
    assert_eq!(f.obstacles[0].center, vec![0.25, 0.5]);
    assert_eq!(f.obstacles[0].radius, 0.3);
    assert!(f.obstacles[0].driven);
    assert_eq!(f.eta, 1.25);
    // driven obstacles stay put between commands
    let f = s.step().unwrap().unwrap();
    assert_eq!(f.obstacles[0].center, vec![0.25, 0.5]);
}

#[test]
fn replaying_a_session_log_gives_identical_frames() {
    let (live, frames) = scripted(EngineKind::Queue);
    // the log covers the episode since the last reset
    let log = live.to_log();
    let tail = &frames[frames.len() - log.ticks.len()..];
    assert_eq!(tail[0].tick, 0);
    let mut text = Vec::new();
    log.write_jsonl(&mut text).unwrap();
    let reloaded = EpisodeLog::read_jsonl(text.as_slice()).unwrap();
    let cursor = ReplayCursor::new(reloaded);
    assert_eq!(cursor.frames(), tail);
}

#[test]
fn invalid_commands_change_nothing_and_are_not_recorded() {
    let mut s = session(Scenario::static_block(), EngineKind::Queue);
    let id = s.world().obstacles[0].id;
    let before = s.world().clone();
    let bad = [
        ClientCommand::SetObstacle {
            id,
            center: vec![5.0, 0.0],
            radius: None,
        },
        ClientCommand::SetObstacle {
            id,
            center: vec![0.0],
            radius: None,
        },
        ClientCommand::SetObstacle {
            id: 99,
            center: vec![0.0, 0.0],
            radius: None,
        },
        ClientCommand::SetObstacle {
            id,
            center: vec![0.0, 0.0],
            radius: Some(-1.0),
        },
        ClientCommand::AddObstacle {
            center: vec![0.0, f64::NAN],
            radius: 0.1,
            id: None,
        },
        ClientCommand::AddObstacle {
            center: vec![0.0, 0.0],
            radius: 0.1,
            id: Some(id),
        },
        ClientCommand::RemoveObstacle { id: 42 },
        ClientCommand::SetEta { eta: f64::INFINITY },
        ClientCommand::Reset {
            scenario: Some(ScenarioRef::Name("nowhere".into())),
            seed: None,
        },
        ClientCommand::Seek { tick: 0 },
        ClientCommand::Step,
    ];
    for c in bad {
        assert!(s.apply(c.clone()).is_err(), "{c:?}");
    }
    assert_eq!(s.world(), &before);
    assert!(s.recorded().is_empty());
}

#[test]
fn paused_sessions_do_not_tick() {
    let mut s = session(Scenario::reach(), EngineKind::Queue);
    s.step().unwrap().unwrap();
    s.apply(ClientCommand::Pause).unwrap();
    assert!(s.step().unwrap().is_none());
    assert_eq!(s.steps(), 1);
    s.apply(ClientCommand::Resume).unwrap();
    assert_eq!(s.step().unwrap().unwrap().tick, 1);
}

#[test]
fn finished_episodes_report_their_outcome_once() {
    let mut s = session(Scenario::reach(), EngineKind::Queue);
    let mut last = None;
    while let Some(f) = s.step().unwrap() {
        assert_eq!(f.progress.done, f.progress.outcome.is_some());
        last = Some(f);
    }
    let last = last.unwrap();
    assert!(last.progress.done);
    assert_eq!(last.progress.outcome.as_ref(), Some(&s.to_log().outcome));
    assert!(s.is_done());
}

#[test]
fn replay_cursor_transport() {
    let mut s = session(Scenario::reach(), EngineKind::Queue);
    for _ in 0..12 {
        s.step().unwrap();
    }
    let mut c = ReplayCursor::new(s.to_log());
    assert_eq!(c.advance().unwrap().tick, 0);
    c.apply(&ClientCommand::Seek { tick: 7 }).unwrap();
    assert_eq!(c.apply(&ClientCommand::Step).unwrap().unwrap().tick, 7);
    assert_eq!(c.advance().unwrap().tick, 8);
    c.apply(&ClientCommand::SetRate { rate: 0.0 }).unwrap();
    assert!(!c.is_streaming());
    c.apply(&ClientCommand::SetRate { rate: 2.0 }).unwrap();
    assert!(c.is_streaming());
    c.apply(&ClientCommand::Pause).unwrap();
    assert!(!c.is_streaming());
    assert!(c.apply(&ClientCommand::Seek { tick: 12 }).is_err());
    assert!(c.apply(&ClientCommand::SetEta { eta: 1.0 }).is_err());
    assert!(c
        .apply(&ClientCommand::Reset {
            scenario: None,
            seed: None
        })
        .is_err());
    c.apply(&ClientCommand::Seek { tick: 11 }).unwrap();
    assert_eq!(c.advance().unwrap().tick, 11);
    assert!(c.advance().is_none());
}
