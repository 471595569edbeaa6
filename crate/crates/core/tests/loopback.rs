mod common;

use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use common::{one_domain, options, read, serve_and_join};
use fedmesh::experiment::{self, RunError};
use fedmesh::federation::FederationError;
use fedmesh::transport::{read_frame, write_frame, Hello, Message, TransportError, PROTOCOL_VERSION};

const CSVS: [&str; 4] = ["loss_curves.csv", "param_trace.csv", "metrics.csv", "client_reports.csv"];

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn assert_same_run(sim_dir: &std::path::Path, net_dir: &std::path::Path) {
    for name in CSVS {
        assert!(read(sim_dir, name) == read(net_dir, name), "{name} differs");
    }
}

#[test]
fn one_client_over_tcp_matches_simulation() {
    let cfg = one_domain(1, 3, "");
    let tmp = tempfile::tempdir().unwrap();
    let (sim_dir, net_dir) = (tmp.path().join("sim"), tmp.path().join("net"));
    let sim = experiment::simulate(&cfg, &options(&sim_dir)).unwrap();
    let (served, joined) = serve_and_join(&cfg, &net_dir);
    let served = served.unwrap();
    let outcome = joined.into_iter().next().unwrap().unwrap();
    assert_eq!(outcome.rounds_completed, 3);
    assert_eq!(outcome.rounds_participated, 3);
    assert_eq!(bits(sim.theta.as_slice()), bits(served.theta.as_slice()));
    assert_same_run(&sim_dir, &net_dir);
}

#[test]
fn five_secure_clients_match_simulation() {
    let cfg = one_domain(5, 4, "secure_aggregation = true");
    let tmp = tempfile::tempdir().unwrap();
    let (sim_dir, net_dir) = (tmp.path().join("sim"), tmp.path().join("net"));
    let sim = experiment::simulate(&cfg, &options(&sim_dir)).unwrap();
    let (served, joined) = serve_and_join(&cfg, &net_dir);
    let served = served.unwrap();
    for j in joined {
        assert_eq!(j.unwrap().rounds_completed, 4);
    }
    assert_eq!(bits(sim.theta.as_slice()), bits(served.theta.as_slice()));
    assert_same_run(&sim_dir, &net_dir);
}

#[test]
fn partial_participation_over_tcp_matches_simulation() {
    let mut cfg = one_domain(4, 3, "");
    cfg.schedule.participation_fraction = 0.5;
    let tmp = tempfile::tempdir().unwrap();
    let (sim_dir, net_dir) = (tmp.path().join("sim"), tmp.path().join("net"));
    experiment::simulate(&cfg, &options(&sim_dir)).unwrap();
    let (served, joined) = serve_and_join(&cfg, &net_dir);
    served.unwrap();
    let participated: u32 = joined.into_iter().map(|j| j.unwrap().rounds_participated).sum();
    assert_eq!(participated, 3 * 2);
    assert_same_run(&sim_dir, &net_dir);
}

/// Registers as `id`, then hangs up on the first global model.
fn deserter(addr: String, id: u32, cfg_hash: [u8; 32], samples: u64) {
    let mut s = TcpStream::connect(addr).unwrap();
    let hello = Message::Hello(Hello { version: PROTOCOL_VERSION, config_hash: cfg_hash, sample_count: samples });
    write_frame(&mut s, &hello.to_frame(0, id).unwrap()).unwrap();
    let ack = Message::from_frame(&read_frame(&mut s).unwrap()).unwrap();
    assert!(matches!(ack, Message::Hello(_)));
    let model = Message::from_frame(&read_frame(&mut s).unwrap()).unwrap();
    assert!(matches!(model, Message::GlobalModel(_)));
}

#[test]
fn a_disconnect_aborts_the_round() {
    let mut cfg = one_domain(2, 3, "");
    cfg.transport.timeout_secs = 5.0;
    let tmp = tempfile::tempdir().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = {
        let cfg = cfg.clone();
        let opts = options(tmp.path());
        thread::spawn(move || experiment::serve_on(&cfg, &opts, listener))
    };
    let honest = {
        let cfg = cfg.clone();
        let addr = addr.clone();
        thread::spawn(move || experiment::join(&cfg, Some(&addr), 0))
    };
    let samples = experiment::validate(&cfg).unwrap().domains[0].3[1] as u64;
    deserter(addr, 1, cfg.hash(), samples);

    match server.join().unwrap() {
        Err(RunError::Transport(TransportError::Federation(FederationError::RoundAborted { round, .. }))) => {
            assert_eq!(round, 1)
        }
        other => panic!("expected an aborted round, got {other:?}"),
    }
    match honest.join().unwrap() {
        Err(RunError::Transport(TransportError::Aborted(_))) => {}
        other => panic!("expected the client to see the abort, got {other:?}"),
    }
}

#[test]
fn a_client_with_another_config_is_turned_away() {
    let mut cfg = one_domain(1, 2, "");
    cfg.transport.timeout_secs = 5.0;
    let mut other = cfg.clone();
    other.schedule.learning_rate = 0.3;
    let tmp = tempfile::tempdir().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = {
        let opts = options(tmp.path());
        let cfg = cfg.clone();
        thread::spawn(move || experiment::serve_on(&cfg, &opts, listener))
    };
    let err = experiment::join(&other, Some(&addr), 0).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(matches!(server.join().unwrap(), Err(RunError::Transport(TransportError::ConfigMismatch(_)))));
}

#[test]
fn join_gives_up_without_a_server() {
    let mut cfg = one_domain(1, 1, "");
    cfg.transport.timeout_secs = 0.3;
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let started = std::time::Instant::now();
    let err = experiment::join(&cfg, Some(&format!("127.0.0.1:{port}")), 0).unwrap_err();
    assert!(started.elapsed() < Duration::from_secs(5));
    assert_eq!(err.exit_code(), 2);
}
