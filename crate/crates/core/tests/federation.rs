//! Federated protocol: message contents, aggregation arithmetic, accounting
//! and reproducibility.

use fedprompt::config::ExperimentConfig;
use fedprompt::federation::{
    local_train, run_rounds, run_rounds_observed, train_centralized, Direction, Env, RoundMessage,
    ServerState, TrainSettings,
};
use fedprompt::prompt::{init_prompts, SharedPrompt};
use fedprompt::runner::{train, World};
use ndarray::{array, Array2};

fn up(client_id: usize, values: Array2<f64>) -> RoundMessage {
    RoundMessage {
        direction: Direction::Up,
        client_id,
        round: 1,
        payload: SharedPrompt(values),
        snapshots: Vec::new(),
    }
}

fn quick_config() -> ExperimentConfig {
    ExperimentConfig {
        rounds: 3,
        lr: 0.005,
        local_epochs: 2,
        ..ExperimentConfig::default()
    }
}

#[test]
fn equal_sizes_average_two_prompts() {
    let a = array![[1.0, 2.0], [3.0, 4.0]];
    let b = array![[-1.0, 0.0], [5.0, 8.0]];
    let mut server =
        ServerState::new(SharedPrompt(Array2::zeros((2, 2))), &[10, 10], false).unwrap();
    server
        .aggregate(&[up(0, a.clone()), up(1, b.clone())])
        .unwrap();
    assert_eq!(server.global_shared.0, (&a + &b) / 2.0);
}

#[test]
fn weighted_mean_arithmetic() {
    let mut server = ServerState::new(SharedPrompt(Array2::zeros((1, 1))), &[1, 3], false).unwrap();
    assert_eq!(server.client_weights.to_vec(), vec![0.25, 0.75]);
    server
        .aggregate(&[up(1, array![[4.0]]), up(0, array![[0.0]])])
        .unwrap();
    assert_eq!(server.global_shared.0, array![[3.0]]);
}

#[test]
fn literal_mean_divides_by_client_count() {
    let mut server = ServerState::new(SharedPrompt(Array2::zeros((1, 1))), &[1, 3], true).unwrap();
    server
        .aggregate(&[up(0, array![[0.0]]), up(1, array![[4.0]])])
        .unwrap();
    assert_eq!(server.global_shared.0, array![[1.5]]);
}

#[test]
fn identical_prompts_are_a_fixed_point() {
    let p = array![[0.1, -0.7, 3.3], [2.0, 0.0, -1.0]];
    let mut server =
        ServerState::new(SharedPrompt(Array2::zeros((2, 3))), &[7, 2, 5], false).unwrap();
    server
        .aggregate(&[up(0, p.clone()), up(1, p.clone()), up(2, p.clone())])
        .unwrap();
    for (x, y) in server.global_shared.0.iter().zip(p.iter()) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn aggregation_is_linear() {
    let msgs = [array![[1.0, -2.0]], array![[0.5, 4.0]], array![[3.0, 3.0]]];
    let c = 2.5;
    let agg = |scale: f64| {
        let mut s =
            ServerState::new(SharedPrompt(Array2::zeros((1, 2))), &[3, 1, 4], false).unwrap();
        let ups: Vec<_> = msgs
            .iter()
            .enumerate()
            .map(|(i, m)| up(i, m * scale))
            .collect();
        s.aggregate(&ups).unwrap();
        s.global_shared.0
    };
    let base = agg(1.0);
    for (x, y) in agg(c).iter().zip(base.iter()) {
        assert!((x - c * y).abs() < 1e-12);
    }
}

#[test]
fn partial_or_duplicate_rounds_are_rejected_without_side_effects() {
    let mut server =
        ServerState::new(SharedPrompt(Array2::zeros((1, 1))), &[1, 1, 1], false).unwrap();
    let before = server.clone();
    let missing = server.aggregate(&[up(0, array![[1.0]]), up(2, array![[1.0]])]);
    assert!(matches!(missing, Err(fedprompt::Error::Protocol(_))));
    let dup = server.aggregate(&[
        up(0, array![[1.0]]),
        up(0, array![[1.0]]),
        up(1, array![[1.0]]),
    ]);
    assert!(matches!(dup, Err(fedprompt::Error::Protocol(_))));
    let unknown = server.aggregate(&[
        up(0, array![[1.0]]),
        up(1, array![[1.0]]),
        up(3, array![[1.0]]),
    ]);
    assert!(matches!(unknown, Err(fedprompt::Error::Protocol(_))));
    assert_eq!(server.global_shared, before.global_shared);
    assert_eq!(server.round, 0);
    assert_eq!(server.bytes_up, 0);
}

#[test]
fn zero_weight_clients_rejected() {
    assert!(ServerState::new(SharedPrompt(Array2::zeros((1, 1))), &[3, 0], false).is_err());
    assert!(ServerState::new(SharedPrompt(Array2::zeros((1, 1))), &[], false).is_err());
}

#[test]
fn no_local_epochs_returns_the_global_prompt() {
    let cfg = ExperimentConfig {
        local_epochs: 0,
        ..quick_config()
    };
    let w = World::build(&cfg).unwrap();
    let (mut clients, mut server) = w.init_federation().unwrap();
    server.global_shared.0.mapv_inplace(|x| x + 0.25);
    let downs = server.broadcast(true);
    assert!(downs
        .iter()
        .all(|d| d.value_count() >= cfg.shared_len * cfg.embed_dim));
    let (msg, stats) = local_train(&mut clients[2], &downs[2], &w.env()).unwrap();
    assert_eq!(msg.payload, server.global_shared);
    assert_eq!(clients[2].prompts.shared, server.global_shared);
    assert_eq!(msg.direction, Direction::Up);
    assert_eq!(stats.steps, 0);
}

#[test]
fn misaddressed_downlink_is_a_protocol_error() {
    let w = World::build(&quick_config()).unwrap();
    let (mut clients, mut server) = w.init_federation().unwrap();
    let downs = server.broadcast(false);
    assert!(matches!(
        local_train(&mut clients[0], &downs[1], &w.env()),
        Err(fedprompt::Error::Protocol(_))
    ));
}

#[test]
fn identical_clients_send_identical_uplinks() {
    let w = World::build(&quick_config()).unwrap();
    let (clients, mut server) = w.init_federation().unwrap();
    let mut a = clients[0].clone();
    let mut b = clients[0].clone();
    let downs = server.broadcast(false);
    let (ma, _) = local_train(&mut a, &downs[0], &w.env()).unwrap();
    let (mb, _) = local_train(&mut b, &downs[0], &w.env()).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn full_scale_uplink_is_2048_values() {
    let prompts = init_prompts(4, 4, 512, 31, 0).unwrap();
    let msg = up(0, prompts.shared.0.clone());
    assert_eq!(msg.value_count(), 2048);
    assert_eq!(msg.bytes(), 2048 * 8);
}

#[test]
fn zero_rounds_leave_everything_untouched() {
    let w = World::build(&quick_config()).unwrap();
    let (mut clients, mut server) = w.init_federation().unwrap();
    let before: Vec<_> = clients.iter().map(|c| c.prompts.clone()).collect();
    let history = run_rounds(&mut clients, &mut server, 0, &w.env()).unwrap();
    assert!(history.is_empty());
    assert_eq!(server.bytes_transmitted(), 0);
    for (c, p) in clients.iter().zip(before) {
        assert_eq!(c.prompts, p);
    }
}

#[test]
fn messages_never_carry_private_values_and_bytes_add_up() {
    let cfg = ExperimentConfig {
        rounds: 10,
        ..quick_config()
    };
    let w = World::build(&cfg).unwrap();
    let (mut clients, mut server) = w.init_federation().unwrap();
    let mut messages = Vec::new();
    let history = run_rounds_observed(&mut clients, &mut server, cfg.rounds, &w.env(), |m| {
        messages.push(m.clone())
    })
    .unwrap();
    assert_eq!(messages.len(), 2 * cfg.clients * cfg.rounds);
    let privates: Vec<u64> = clients
        .iter()
        .flat_map(|c| c.prompts.private.0.iter().map(|x| x.to_bits()))
        .collect();
    for m in &messages {
        let carried = m
            .payload
            .0
            .iter()
            .chain(m.snapshots.iter().flat_map(|s| s.prompt.0.iter()));
        for x in carried {
            assert!(
                !privates.contains(&x.to_bits()),
                "private value on the wire"
            );
        }
        if m.direction == Direction::Up {
            assert!(m.snapshots.is_empty());
            assert_eq!(m.value_count(), cfg.shared_len * cfg.embed_dim);
        }
    }
    let n = cfg.clients as u64;
    let per_round_up = n * (cfg.shared_len * cfg.embed_dim) as u64 * 8;
    assert_eq!(server.bytes_up, per_round_up * cfg.rounds as u64);
    let mut last_total = 0;
    for round in 1..=cfg.rounds {
        let rows: Vec<_> = history.rows.iter().filter(|r| r.round == round).collect();
        assert_eq!(rows.iter().map(|r| r.bytes_up).sum::<u64>(), per_round_up);
        let total: u64 = history
            .rows
            .iter()
            .filter(|r| r.round <= round)
            .map(|r| r.bytes_up + r.bytes_down)
            .sum();
        assert!(total > last_total);
        last_total = total;
    }
    assert_eq!(last_total, server.bytes_transmitted());
    assert!((server.client_weights.sum() - 1.0).abs() <= 1e-12);
}

#[test]
fn snapshots_only_travel_when_alignment_is_on() {
    for dpac in [true, false] {
        let cfg = ExperimentConfig {
            dpac,
            rounds: 2,
            ..quick_config()
        };
        let w = World::build(&cfg).unwrap();
        let (mut clients, mut server) = w.init_federation().unwrap();
        let mut snapshot_counts = Vec::new();
        run_rounds_observed(&mut clients, &mut server, 2, &w.env(), |m| {
            if m.direction == Direction::Down {
                snapshot_counts.push((m.round, m.snapshots.len()));
            }
        })
        .unwrap();
        for (round, count) in snapshot_counts {
            let expected = if dpac && round > 1 { cfg.clients } else { 0 };
            assert_eq!(count, expected, "dpac {dpac} round {round}");
        }
    }
}

#[test]
fn same_seed_same_history() {
    let w = World::build(&quick_config()).unwrap();
    let a = train(&w).unwrap();
    let b = train(&World::build(&quick_config()).unwrap()).unwrap();
    assert_eq!(a.history.rows.len(), b.history.rows.len());
    for (x, y) in a.history.rows.iter().zip(&b.history.rows) {
        assert_eq!(x.accuracy.to_bits(), y.accuracy.to_bits());
        assert_eq!(x.ce.to_bits(), y.ce.to_bits());
        assert_eq!(x.dpac.to_bits(), y.dpac.to_bits());
        assert_eq!((x.bytes_up, x.bytes_down), (y.bytes_up, y.bytes_down));
    }
    assert_eq!(a.server.global_shared, b.server.global_shared);
}

#[test]
fn single_client_federation_is_centralized_training() {
    let cfg = ExperimentConfig {
        clients: 1,
        ..quick_config()
    };
    let w = World::build(&cfg).unwrap();
    let (mut clients, mut server) = w.init_federation().unwrap();
    let mut solo = clients[0].clone();
    run_rounds(&mut clients, &mut server, cfg.rounds, &w.env()).unwrap();
    train_centralized(&mut solo, cfg.rounds, &w.env()).unwrap();
    assert_eq!(server.global_shared, solo.prompts.shared);
    assert_eq!(clients[0].prompts.private, solo.prompts.private);
}

#[test]
fn empty_local_dataset_is_a_configuration_error() {
    let w = World::build(&quick_config()).unwrap();
    let (mut clients, mut server) = w.init_federation().unwrap();
    clients[0].train.clear();
    let downs = server.broadcast(false);
    let settings = TrainSettings::default();
    let env = Env {
        settings: &settings,
        ..w.env()
    };
    assert!(matches!(
        local_train(&mut clients[0], &downs[0], &env),
        Err(fedprompt::Error::Config(_))
    ));
}
