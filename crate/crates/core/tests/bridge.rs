mod common;

use racesim::bridge::*;
use racesim::geometry::Pose2;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

fn zero_client(addr: std::net::SocketAddr) {
    let mut c = Client::connect(addr).unwrap();
    while let Some(f) = c.recv_frame().unwrap() {
        if c.send_command(&Command { tick: f.tick, a: 0.0, delta: 0.0 }).is_err() {
            break;
        }
    }
}

#[test]
fn zero_client_for_exact_tick_budget() {
    let sc = common::oval();
    let world = common::oval_world(&sc, &sc.map, 1, false);
    let cfg = ServeConfig { max_ticks: Some(100), ..Default::default() };
    let report = common::run_session(world, cfg, zero_client);
    assert_eq!(report.end, SessionEnd::Completed);
    assert_eq!(report.log.records.len(), 100);
    assert_eq!(report.frames_sent, 100);
    for (k, r) in report.log.records.iter().enumerate() {
        assert_eq!(r.tick, k as u64);
        assert_eq!(r.ground_truth.pose(), sc.start);
    }
}

#[test]
fn wrong_tick_is_a_protocol_error() {
    let sc = common::oval();
    let world = common::oval_world(&sc, &sc.map, 1, false);
    let report = common::run_session(world, ServeConfig::default(), |addr| {
        let mut c = Client::connect(addr).unwrap();
        for _ in 0..3 {
            let f = c.recv_frame().unwrap().unwrap();
            c.send_command(&Command { tick: f.tick, a: 1.0, delta: 0.0 }).unwrap();
        }
        let f = c.recv_frame().unwrap().unwrap();
        let _ = c.send_command(&Command { tick: f.tick + 1, a: 1.0, delta: 0.0 });
        while let Ok(Some(_)) = c.recv_frame() {}
    });
    match &report.end {
        SessionEnd::ProtocolError(msg) => assert!(msg.contains("expected 3"), "{msg}"),
        other => panic!("unexpected end {other:?}"),
    }
    assert_eq!(report.log.records.len(), 3);
}

#[test]
fn malformed_command_names_the_field() {
    let sc = common::oval();
    let world = common::oval_world(&sc, &sc.map, 1, false);
    let report = common::run_session(world, ServeConfig::default(), |addr| {
        let s = TcpStream::connect(addr).unwrap();
        let mut r = BufReader::new(s.try_clone().unwrap());
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        (&s).write_all(b"{\"type\":\"cmd\",\"tick\":0,\"a\":1.0}\n").unwrap();
        let _ = r.read_line(&mut line);
    });
    match &report.end {
        SessionEnd::ProtocolError(msg) => assert!(msg.contains("delta"), "{msg}"),
        other => panic!("unexpected end {other:?}"),
    }
}

#[test]
fn disconnect_keeps_partial_log() {
    let sc = common::oval();
    let world = common::oval_world(&sc, &sc.map, 1, false);
    let report = common::run_session(world, ServeConfig::default(), |addr| {
        let mut c = Client::connect(addr).unwrap();
        for _ in 0..10 {
            let f = c.recv_frame().unwrap().unwrap();
            c.send_command(&Command { tick: f.tick, a: 0.5, delta: 0.0 }).unwrap();
        }
    });
    assert_eq!(report.end, SessionEnd::Disconnected);
    assert_eq!(report.log.records.len(), 10);
    assert!(report.is_clean());
}

fn stalling_client(addr: std::net::SocketAddr) {
    let mut c = Client::connect(addr).unwrap();
    while let Ok(Some(f)) = c.recv_frame() {
        if f.tick == 5 {
            std::thread::sleep(Duration::from_millis(150));
        }
        let a = if f.tick < 5 { 2.0 } else { 1.0 };
        if c.send_command(&Command { tick: f.tick, a, delta: 0.0 }).is_err() {
            break;
        }
    }
}

#[test]
fn timeout_policies() {
    let sc = common::oval();
    for (policy, expect) in [(TimeoutPolicy::Hold, Some(2.0)), (TimeoutPolicy::Zero, Some(0.0)), (TimeoutPolicy::Abort, None)] {
        let world = common::oval_world(&sc, &sc.map, 1, false);
        let cfg = ServeConfig {
            timeout: Some(Duration::from_millis(100)),
            on_timeout: policy,
            max_ticks: Some(12),
            ..Default::default()
        };
        let report = common::run_session(world, cfg, stalling_client);
        match expect {
            Some(a) => {
                assert_eq!(report.end, SessionEnd::Completed, "{policy:?}");
                assert_eq!(report.timeouts, 1);
                assert_eq!(report.log.records[5].cmd.a, a);
                assert_eq!(report.log.records[6].cmd.a, 1.0);
                assert_eq!(report.log.records.len(), 12);
            }
            None => assert_eq!(report.end, SessionEnd::TimeoutAbort { tick: 5 }),
        }
    }
}

#[test]
fn reset_teleports_ego() {
    let sc = common::oval();
    let world = common::oval_world(&sc, &sc.map, 1, false);
    let target = Pose2::new(2.0, -3.0, 0.1);
    let cfg = ServeConfig { max_ticks: Some(6), ..Default::default() };
    let report = common::run_session(world, cfg, move |addr| {
        let mut c = Client::connect(addr).unwrap();
        while let Ok(Some(f)) = c.recv_frame() {
            let sent = if f.tick == 3 {
                c.send_reset(target)
            } else {
                c.send_command(&Command { tick: f.tick, a: 1.0, delta: 0.0 })
            };
            if sent.is_err() {
                break;
            }
        }
    });
    let r = &report.log.records[3];
    assert_eq!(r.reset, Some(target));
    assert_eq!(r.ground_truth.pose(), target);
    assert_eq!(r.ground_truth.v_x, 0.0);
    assert_eq!(r.cmd.a, 0.0);
}

#[test]
fn replay_reproduces_the_log() {
    let sc = common::oval();
    let original = common::gt_session(&sc, 9, 500, None);
    assert_eq!(original.log.records.len(), 500);
    let actions = actions_from_log(&original.log);
    let world = common::oval_world(&sc, &sc.map, 9, true);
    let replayed = common::run_session(world, ServeConfig::default(), move |addr| {
        assert_eq!(replay_client(&actions, addr).unwrap(), 500);
    });
    assert_eq!(replayed.log.digest(), original.log.digest());
}

#[test]
fn client_delays_do_not_change_results() {
    let sc = common::oval();
    let a = common::gt_session(&sc, 4, 300, None);
    let b = common::gt_session(&sc, 4, 300, Some((1, 3000)));
    assert_eq!(a.log.digest(), b.log.digest());
    assert_eq!(a.frames_sent, 300);
    assert_eq!(b.frames_sent, 300);
}
