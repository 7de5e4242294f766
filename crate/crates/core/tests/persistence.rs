use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use treesync_core::persist::{recover, FileStore, LOG_FILE};
use treesync_core::protocol::UpdateEntry;
use treesync_core::rules::{Principal, PrincipalKind};
use treesync_core::{DataTree, MessageBody, Path, RuleSet, Server, ServerConfig, TokenRegistry, Value, WireMessage};

fn random_ops(rng: &mut ChaCha8Rng) -> Vec<UpdateEntry> {
    let paths = ["/a", "/a/x", "/a/y/z", "/b", "/b/q", "/c"];
    let n = rng.gen_range(1..=3);
    paths
        .choose_multiple(rng, n)
        .map(|p| {
            let path = Path::parse(p).unwrap();
            match rng.gen_range(0..4) {
                0 => UpdateEntry::delete(&path),
                1 => UpdateEntry::set(&path, Value::branch([("k", Value::Number(rng.gen_range(0..9) as f64))])),
                2 => UpdateEntry::set(&path, format!("v{}", rng.gen_range(0..9))),
                _ => UpdateEntry::set(&path, rng.gen_range(-1e6..1e6)),
            }
        })
        .collect()
}

fn server_over(dir: &std::path::Path, checkpoint_every: u64) -> Server {
    let (store, tree) = FileStore::open(dir, checkpoint_every).unwrap();
    let registry = TokenRegistry::new().with(
        "t",
        Principal {
            id: "w".into(),
            kind: PrincipalKind::User,
        },
    );
    Server::new(ServerConfig::default(), RuleSet::allow_authenticated(), registry, tree).with_sink(Box::new(store))
}

fn drive(server: &mut Server, rng: &mut ChaCha8Rng, commits: usize) {
    let s = server.open_session(0);
    server.handle_message(s, WireMessage::new(0, MessageBody::Auth { token: "t".into() }), 0);
    let start = server.tree().revision().0;
    let mut id = 0;
    while (server.tree().revision().0 - start) < commits as u64 {
        id += 1;
        server.handle_message(s, WireMessage::new(id, MessageBody::Update { ops: random_ops(rng) }), id);
    }
}

#[test]
fn hundred_random_commits_recover_value_equal() {
    for (seed, every) in [(1, 0), (2, 7), (3, 100), (4, 1)] {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let live = {
            let mut server = server_over(dir.path(), every);
            drive(&mut server, &mut rng, 100);
            server.tree().clone()
        };
        let (_, recovered) = FileStore::open(dir.path(), every).unwrap();
        assert_eq!(recovered, live, "checkpoint every {every}");
    }
}

#[test]
fn recovered_server_keeps_counting_revisions() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    {
        let mut server = server_over(dir.path(), 10);
        drive(&mut server, &mut rng, 25);
    }
    let live = {
        let mut server = server_over(dir.path(), 10);
        assert_eq!(server.tree().revision().0, 25);
        drive(&mut server, &mut rng, 25);
        server.tree().clone()
    };
    let (_, recovered) = FileStore::open(dir.path(), 10).unwrap();
    assert_eq!(recovered.revision().0, 50);
    assert_eq!(recovered, live);
}

#[test]
fn empty_log_is_empty_tree() {
    let (tree, rec) = recover(None, "").unwrap();
    assert_eq!(tree, DataTree::new());
    assert!(rec.records.is_empty() && !rec.dropped_tail);
}

#[test]
fn truncated_final_record_replays_the_rest() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut server = server_over(dir.path(), 0);
    drive(&mut server, &mut rng, 30);
    drop(server);

    let text = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let (prefix, _) = recover(None, &(lines[..lines.len() - 1].join("\n") + "\n")).unwrap();
    let last = lines[lines.len() - 1];
    for cut in [1, last.len() / 2, last.len() - 1, last.len()] {
        let torn = format!("{}{}", lines[..lines.len() - 1].join("\n") + "\n", &last[..cut]);
        let (tree, rec) = recover(None, &torn).unwrap();
        assert!(rec.dropped_tail, "cut {cut}");
        assert_eq!(tree, prefix);
        assert_eq!(tree.revision().0, 29);
    }
}
