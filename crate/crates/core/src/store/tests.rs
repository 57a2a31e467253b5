use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;

use super::*;
use crate::tokenizer::count_tokens;

fn sess(s: &Store) -> SessionId {
    s.create_session(None, AgentKind::Root).unwrap().id
}

fn file(s: &Store, path: &str) -> FileRecord {
    s.register_file(
        None,
        NewFile {
            path: path.into(),
            mime_kind: MimeKind::Text,
            token_count: 10,
            exploration_summary: "a file".into(),
            content_hash: "00".into(),
        },
    )
    .unwrap()
}

fn fill(s: &Store, session: &SessionId, n: usize) -> Vec<MessageRecord> {
    (0..n)
        .map(|i| {
            s.ingest(session, Role::User, &format!("message number {i}"), &[])
                .unwrap()
                .0
        })
        .collect()
}

#[test]
fn first_message_gets_seq_one() {
    let s = Store::in_memory().unwrap();
    let id = SessionId::from("ses_implicit");
    let m = s.append_message(&id, Role::User, "hello", &[]).unwrap();
    assert_eq!(m.seq, 1);
    assert_eq!(m.token_count, count_tokens("hello").0);
    assert_eq!(s.message(&m.id).unwrap(), m);
    assert_eq!(s.message_by_seq(&id, 1).unwrap(), m);
    assert_eq!(s.session(&id).unwrap().agent_kind, AgentKind::Root);
}

#[test]
fn sequential_appends_are_ordered() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    let a = s.append_message(&id, Role::User, "one", &[]).unwrap();
    let b = s.append_message(&id, Role::Assistant, "two", &[]).unwrap();
    assert_eq!((a.seq, b.seq), (1, 2));
    let all = s.messages(&id).unwrap();
    assert_eq!(all, vec![a, b]);
}

#[test]
fn ten_thousand_messages_round_trip() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    let mut harness = Vec::new();
    for i in 0..10_000u32 {
        let content = format!("msg {i} ünïcødé {}", "x".repeat((i % 97) as usize));
        s.append_message(&id, Role::User, &content, &[]).unwrap();
        harness.push(content);
    }
    let back = s.messages_in_span(&id, 1, 10_000).unwrap();
    assert_eq!(back.len(), harness.len());
    for (m, expected) in back.iter().zip(&harness) {
        assert_eq!(m.content.as_bytes(), expected.as_bytes());
    }
}

#[test]
fn unknown_file_reference_is_rejected() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    let err = s
        .append_message(&id, Role::Tool, "x", &[FileId::from("fil_nope")])
        .unwrap_err();
    assert!(matches!(err, LcmError::Integrity(_)));
    assert_eq!(s.message_count(&id).unwrap(), 0);
}

#[test]
fn leaf_inherits_file_refs() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    let f1 = file(&s, "/tmp/f1");
    for i in 1..=50u64 {
        let refs = if i == 7 { vec![f1.id.clone()] } else { vec![] };
        s.append_message(&id, Role::Tool, &format!("m{i}"), &refs).unwrap();
    }
    let leaf = s
        .create_summary(&id, SummaryChildren::Span { lo: 1, hi: 50 }, "sum", Level::Normal)
        .unwrap();
    assert!(leaf.file_refs.contains(&f1.id));
    assert_eq!(leaf.kind, SummaryKind::Leaf);
}

#[test]
fn condensed_needs_two_existing_children() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    fill(&s, &id, 4);
    let l1 = s
        .create_summary(&id, SummaryChildren::Span { lo: 1, hi: 2 }, "a", Level::Normal)
        .unwrap();
    let one = s.create_summary(
        &id,
        SummaryChildren::Nodes { ids: vec![l1.id.clone()] },
        "c",
        Level::Normal,
    );
    assert!(matches!(one, Err(LcmError::Invalid(_))));
    let dangling = s.create_summary(
        &id,
        SummaryChildren::Nodes { ids: vec![l1.id.clone(), SummaryId::from("sum_missing")] },
        "c",
        Level::Normal,
    );
    assert!(matches!(dangling, Err(LcmError::Integrity(_))));
    assert_eq!(s.summaries(&id).unwrap().len(), 1);
}

#[test]
fn leaf_span_must_exist() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    fill(&s, &id, 3);
    let err = s
        .create_summary(&id, SummaryChildren::Span { lo: 2, hi: 9 }, "x", Level::Normal)
        .unwrap_err();
    assert!(matches!(err, LcmError::Integrity(_)));
    let err = s
        .create_summary(&id, SummaryChildren::Span { lo: 3, hi: 2 }, "x", Level::Normal)
        .unwrap_err();
    assert!(matches!(err, LcmError::Invalid(_)));
}

#[test]
fn overlapping_children_rejected() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    fill(&s, &id, 6);
    let a = s.create_summary(&id, SummaryChildren::Span { lo: 1, hi: 4 }, "a", Level::Normal).unwrap();
    let b = s.create_summary(&id, SummaryChildren::Span { lo: 3, hi: 6 }, "b", Level::Normal).unwrap();
    let err = s
        .create_summary(&id, SummaryChildren::Nodes { ids: vec![a.id, b.id] }, "c", Level::Normal)
        .unwrap_err();
    assert!(matches!(err, LcmError::Integrity(_)));
}

#[test]
fn resolve_leaf_span() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    let msgs = fill(&s, &id, 6);
    let leaf = s
        .create_summary(&id, SummaryChildren::Span { lo: 3, hi: 5 }, "x", Level::Normal)
        .unwrap();
    let got = s.resolve_children(&leaf.id).unwrap();
    let expected: Vec<_> = msgs[2..5].iter().cloned().map(Expanded::Message).collect();
    assert_eq!(got, expected);
}

#[test]
fn depth_two_dag_resolves_to_all_messages() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    let msgs = fill(&s, &id, 9);
    let leaves: Vec<_> = [(1, 3), (4, 6), (7, 9)]
        .into_iter()
        .map(|(lo, hi)| {
            s.create_summary(&id, SummaryChildren::Span { lo, hi }, "l", Level::Normal)
                .unwrap()
        })
        .collect();
    let top = s
        .create_summary(
            &id,
            SummaryChildren::Nodes { ids: leaves.iter().map(|l| l.id.clone()).collect() },
            "top",
            Level::Aggressive,
        )
        .unwrap();
    let first = s.resolve_children(&top.id).unwrap();
    assert_eq!(first, leaves.iter().cloned().map(Expanded::Summary).collect::<Vec<_>>());
    let mut recovered = BTreeSet::new();
    for child in first {
        let Expanded::Summary(node) = child else { panic!() };
        for m in s.resolve_children(&node.id).unwrap() {
            let Expanded::Message(m) = m else { panic!() };
            recovered.insert(m.id);
        }
    }
    let expected: BTreeSet<_> = msgs.iter().map(|m| m.id.clone()).collect();
    assert_eq!(recovered, expected);
    assert!(s.validate_dag().unwrap().is_empty());
}

#[test]
fn resolve_unknown_is_not_found() {
    let s = Store::in_memory().unwrap();
    assert!(matches!(
        s.resolve_children(&SummaryId::from("sum_x")),
        Err(LcmError::NotFound(_))
    ));
}

#[test]
fn describe_contract() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    let f = file(&s, "/data/f1.txt");
    let msgs = fill(&s, &id, 3);
    let leaf = s
        .create_summary(&id, SummaryChildren::Span { lo: 1, hi: 2 }, "leaf text", Level::Normal)
        .unwrap();
    match s.describe(f.id.as_str()).unwrap() {
        Description::File { file } => {
            assert_eq!(file.path, "/data/f1.txt");
            assert_eq!(file.exploration_summary, "a file");
        }
        other => panic!("{other:?}"),
    }
    match s.describe(leaf.id.as_str()).unwrap() {
        Description::Summary { node, .. } => {
            assert_eq!(node.kind, SummaryKind::Leaf);
            assert_eq!(node.children, SummaryChildren::Span { lo: 1, hi: 2 });
            assert_eq!(node.text, "leaf text");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(s.describe(msgs[0].id.as_str()), Err(LcmError::Invalid(_))));
    assert!(matches!(s.describe("sum_unknown"), Err(LcmError::NotFound(_))));
    assert!(matches!(s.describe("whatever"), Err(LcmError::NotFound(_))));
}

#[test]
fn messages_cannot_be_mutated() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    fill(&s, &id, 1);
    let conn = s.conn.lock();
    assert!(conn.execute("UPDATE messages SET content = 'x'", []).is_err());
    assert!(conn.execute("DELETE FROM messages", []).is_err());
    assert!(conn.execute("DELETE FROM summaries", []).is_ok()); // no rows, trigger not fired
}

fn compact_prefix(s: &Store, id: &SessionId, n: usize) -> SummaryNode {
    let ctx = s.context(id).unwrap();
    let prefix = ctx.entries[..n].to_vec();
    let lo = prefix[0].lo_seq;
    let hi = prefix.last().unwrap().hi_seq;
    let summaries: Vec<_> = prefix
        .iter()
        .filter(|e| e.kind == EntryKind::Summary)
        .map(|e| NodeRef::Existing(SummaryId(e.ref_id.clone())))
        .collect();
    let plan = if summaries.is_empty() {
        vec![PlannedNode::Leaf { lo, hi, text: "leaf".into(), level: Level::Truncate }]
    } else {
        let raw_lo = prefix.iter().find(|e| e.kind != EntryKind::Summary).unwrap().lo_seq;
        let mut children = summaries;
        children.push(NodeRef::Planned(0));
        vec![
            PlannedNode::Leaf { lo: raw_lo, hi, text: "leaf".into(), level: Level::Truncate },
            PlannedNode::Condensed { children, text: "cond".into(), level: Level::Truncate },
        ]
    };
    s.commit_compaction(id, &prefix, &plan).unwrap().unwrap()
}

#[test]
fn compaction_replaces_prefix_and_search_reports_cover() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    fill(&s, &id, 10);
    let first = compact_prefix(&s, &id, 4);
    assert_eq!(s.context(&id).unwrap().entries.len(), 7);
    let hits = s.search_messages(&id, "number 1$", None).unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].covering.as_ref(), Some(&first.id));

    let second = compact_prefix(&s, &id, 3);
    assert_eq!(second.kind, SummaryKind::Condensed);
    let hits = s.search_messages(&id, "number 1$", None).unwrap();
    // Still found, still covered by the original leaf that is now under the
    // condensed node.
    assert_eq!(hits[0].covering.as_ref(), Some(&first.id));
    let live = s.search_messages(&id, "number 9", None).unwrap();
    assert_eq!(live[0].covering, None);
    assert!(s.search_messages(&id, "zzz", None).unwrap().is_empty());
    assert!(s.verify_session(&id).unwrap().ok);
    assert!(s.validate_dag().unwrap().is_empty());
}

#[test]
fn stale_prefix_is_not_committed() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    fill(&s, &id, 5);
    let ctx = s.context(&id).unwrap();
    let stale = ctx.entries[..2].to_vec();
    compact_prefix(&s, &id, 3);
    let before = s.summaries(&id).unwrap().len();
    let plan = vec![PlannedNode::Leaf { lo: 1, hi: 2, text: "x".into(), level: Level::Normal }];
    assert!(s.commit_compaction(&id, &stale, &plan).unwrap().is_none());
    assert_eq!(s.summaries(&id).unwrap().len(), before);
}

#[test]
fn scoped_search() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    fill(&s, &id, 10);
    let leaf = s
        .create_summary(&id, SummaryChildren::Span { lo: 1, hi: 5 }, "x", Level::Normal)
        .unwrap();
    let hits = s.search_messages(&id, "number", Some(&leaf.id)).unwrap();
    assert_eq!(hits.iter().map(|h| h.message.seq).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
}

#[test]
fn contains_text_scans_everything() {
    let s = Store::in_memory().unwrap();
    let id = sess(&s);
    s.append_message(&id, Role::User, "needle-in-a-haystack", &[]).unwrap();
    assert!(s.contains_text("needle-in").unwrap());
    assert!(!s.contains_text("not-present-anywhere").unwrap());
}

#[test]
fn claims_are_exclusive_and_leases_expire() {
    let s = Store::in_memory().unwrap();
    let job = s
        .create_map_job(
            NewMapJob {
                mode: lcm_model::MapMode::Llm,
                input_path: "in".into(),
                output_path: "out".into(),
                prompt: "p".into(),
                output_schema: serde_json::json!({}),
                concurrency: 2,
                retry_limit: 3,
                read_only: false,
                parent_session: None,
            },
            &[serde_json::json!(1), serde_json::json!(2)],
        )
        .unwrap();
    let a = s.claim_item(&job.id, 300_000).unwrap().unwrap();
    let b = s.claim_item(&job.id, 300_000).unwrap().unwrap();
    assert_ne!(a.item.index, b.item.index);
    assert!(s.claim_item(&job.id, 300_000).unwrap().is_none());
    // With a zero lease the running items are reclaimable; attempts survive.
    assert_eq!(s.begin_attempt(&job.id, a.item.index, &a.claim_token, 3).unwrap(), 1);
    let again = s.claim_item(&job.id, 0).unwrap().unwrap();
    assert_eq!(again.item.index, a.item.index);
    assert_eq!(again.item.attempts, 1);
    // The stale claim can no longer write.
    assert!(s.begin_attempt(&job.id, a.item.index, &a.claim_token, 3).is_err());
    assert!(s
        .finish_item(&job.id, a.item.index, &a.claim_token, Ok(&serde_json::json!(1)))
        .is_err());
    s.finish_item(&job.id, again.item.index, &again.claim_token, Err("bad")).unwrap();
    assert_eq!(s.map_item(&job.id, again.item.index).unwrap().state, lcm_model::ItemState::Error);
}

/// Brute-force oracle: covered message seqs of a node, by walking children.
fn oracle_cover(nodes: &HashMap<SummaryId, SummaryChildren>, id: &SummaryId) -> Vec<u64> {
    match &nodes[id] {
        SummaryChildren::Span { lo, hi } => (*lo..=*hi).collect(),
        SummaryChildren::Nodes { ids } => ids.iter().flat_map(|c| oracle_cover(nodes, c)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_dags_resolve_every_message_once(
        cuts in proptest::collection::vec(1u64..6, 2..10),
        groupings in proptest::collection::vec(2usize..4, 1..5),
    ) {
        let s = Store::in_memory().unwrap();
        let id = sess(&s);
        let total: u64 = cuts.iter().sum();
        fill(&s, &id, total as usize);
        let mut nodes = HashMap::new();
        let mut frontier = Vec::new();
        let mut lo = 1;
        for len in &cuts {
            let hi = lo + len - 1;
            let leaf = s.create_summary(&id, SummaryChildren::Span { lo, hi }, "l", Level::Normal).unwrap();
            nodes.insert(leaf.id.clone(), leaf.children.clone());
            frontier.push(leaf.id);
            lo = hi + 1;
        }
        for g in groupings {
            if frontier.len() < 2 { break; }
            let take = g.min(frontier.len());
            let group: Vec<_> = frontier.drain(..take).collect();
            let c = s.create_summary(&id, SummaryChildren::Nodes { ids: group }, "c", Level::Normal).unwrap();
            nodes.insert(c.id.clone(), c.children.clone());
            frontier.insert(0, c.id);
        }
        prop_assert!(s.validate_dag().unwrap().is_empty());
        let mut reached = Vec::new();
        for root in &frontier {
            let mut stack = vec![root.clone()];
            while let Some(n) = stack.pop() {
                for child in s.resolve_children(&n).unwrap() {
                    match child {
                        Expanded::Message(m) => reached.push(m.seq),
                        Expanded::Summary(c) => stack.push(c.id),
                    }
                }
            }
        }
        let mut oracle: Vec<u64> = frontier.iter().flat_map(|r| oracle_cover(&nodes, r)).collect();
        reached.sort();
        oracle.sort();
        prop_assert_eq!(&reached, &oracle);
        prop_assert_eq!(reached, (1..=total).collect::<Vec<_>>());
    }

    #[test]
    fn literal_search_equals_linear_scan(
        corpus in proptest::collection::vec("[a-e ]{0,30}", 1..40),
        needle in "[a-e]{1,3}",
    ) {
        let s = Store::in_memory().unwrap();
        let id = sess(&s);
        for c in &corpus {
            s.append_message(&id, Role::User, c, &[]).unwrap();
        }
        let got: Vec<u64> = s
            .search_messages(&id, &regex::escape(&needle), None)
            .unwrap()
            .into_iter()
            .map(|h| h.message.seq)
            .collect();
        let expected: Vec<u64> = corpus
            .iter()
            .enumerate()
            .filter(|(_, c)| c.contains(needle.as_str()))
            .map(|(i, _)| i as u64 + 1)
            .collect();
        prop_assert_eq!(got, expected);
    }
}
