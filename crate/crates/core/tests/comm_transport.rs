use std::time::Duration;

use bsptab::columnar::{canonical_compare, concat, serialize_table, Equality};
use bsptab::comm::{
    format_hostfile, init, loopback_peers, parse_hostfile, run_local, run_tcp_loopback, Communicator, ReduceOp,
    WorkerSpec,
};
use bsptab::rng::Rng;
use bsptab::verify::random_table;
use bsptab::Error;

fn transcript(c: &Communicator) -> Vec<Vec<u8>> {
    let (rank, p) = (c.rank(), c.world_size());
    let mut rng = Rng::new(77 + rank as u64);
    let xs: Vec<f64> = (0..32).map(|_| rng.normal() * 1e3).collect();
    let t = random_table(&mut rng, 40, 0.2, true);
    let dest: Vec<usize> = (0..t.nrows()).map(|_| rng.index(p)).collect();
    vec![
        c.broadcast_bytes(p - 1, &[rank as u8; 3]).unwrap(),
        c.allgather_bytes(&[rank as u8]).unwrap().concat(),
        c.allreduce(&xs, ReduceOp::Sum).unwrap().iter().flat_map(|x| x.to_le_bytes()).collect(),
        c.allreduce(&[rank as i64], ReduceOp::Max).unwrap()[0].to_le_bytes().to_vec(),
        serialize_table(&c.shuffle_table(&t, &dest).unwrap()),
        c.allgather_tables(&t).unwrap().iter().flat_map(serialize_table).collect(),
    ]
}

#[test]
fn tcp_and_in_process_agree_bytewise() {
    for p in [1, 2, 4] {
        assert_eq!(run_tcp_loopback(p, |c| transcript(&c)).unwrap(), run_local(p, |c| transcript(&c)));
    }
}

#[test]
fn shuffle_conserves_rows() {
    let p = 3;
    let out = run_local(p, |c| {
        let mut rng = Rng::new(c.rank() as u64);
        let t = random_table(&mut rng, 100 * c.rank(), 0.1, true);
        let dest: Vec<usize> = (0..t.nrows()).map(|_| rng.index(p)).collect();
        (c.shuffle_table(&t, &dest).unwrap(), t)
    });
    let schema = out[0].1.schema().clone();
    let sent = concat(&schema, out.iter().map(|o| &o.1)).unwrap();
    let got = concat(&schema, out.iter().map(|o| &o.0)).unwrap();
    assert_eq!(canonical_compare(&sent, &got), Equality::Equal);
}

#[test]
fn barriers_with_interleaved_sends_do_not_deadlock() {
    let ok = run_tcp_loopback(3, |c| {
        let (r, p) = (c.rank(), c.world_size());
        for i in 0..100u32 {
            c.send((r + 1) % p, i, &i.to_le_bytes()).unwrap();
            c.barrier().unwrap();
            assert_eq!(c.recv((r + p - 1) % p, i).unwrap(), i.to_le_bytes());
        }
        true
    })
    .unwrap();
    assert!(ok.iter().all(|&b| b));
}

#[test]
fn hostfile_round_trip_and_errors() {
    let peers = loopback_peers(3).unwrap();
    assert_eq!(parse_hostfile(&format_hostfile(&peers)).unwrap(), peers);
    assert!(parse_hostfile("# only a comment\n0 a:1\n2 b:2\n").is_err());
    assert!(matches!(parse_hostfile("0 a:1\n0 b:2\n"), Err(Error::RankCollision(_))));
}

#[test]
fn missing_peer_times_out_at_rendezvous() {
    let peers = loopback_peers(2).unwrap();
    let mut spec = WorkerSpec::tcp(0, peers);
    if let bsptab::comm::TransportSpec::Tcp { rendezvous_timeout, .. } = &mut spec.transport {
        *rendezvous_timeout = Duration::from_millis(300);
    }
    assert!(matches!(init(&spec), Err(Error::RendezvousTimeout(_))));
}
