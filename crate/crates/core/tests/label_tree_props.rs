use proptest::prelude::*;

use partlabel_core::label_tree::{LabelNode, LabelTree, NodeKind};

#[derive(Debug, Clone)]
enum Sketch {
    Leaf,
    Node(bool, Vec<Sketch>),
}

fn sketch() -> impl Strategy<Value = Sketch> {
    Just(Sketch::Leaf).prop_recursive(4, 48, 5, |inner| {
        (any::<bool>(), prop::collection::vec(inner, 1..5)).prop_map(|(or, c)| Sketch::Node(or, c))
    })
}

fn build(s: &Sketch, next: &mut usize) -> LabelNode {
    let id = format!("n{next}");
    *next += 1;
    match s {
        Sketch::Leaf => LabelNode::leaf(&id, [0, 0, 0]),
        Sketch::Node(or, children) => {
            let kind = if *or { NodeKind::Or } else { NodeKind::And };
            let children = children.iter().map(|c| build(c, next)).collect();
            LabelNode::internal(&id, kind, children)
        }
    }
}

fn tree() -> impl Strategy<Value = LabelTree> {
    prop::collection::vec(sketch(), 1..6).prop_map(|children| {
        let mut next = 1;
        let children = children.iter().map(|c| build(c, &mut next)).collect();
        LabelTree::from_root(LabelNode::internal("n0", NodeKind::And, children)).unwrap()
    })
}

fn sorted(v: Vec<&str>) -> Vec<String> {
    let mut v: Vec<String> = v.into_iter().map(String::from).collect();
    v.sort();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn prune_preserves_leaves_and_is_idempotent(raw in tree()) {
        let pruned = raw.prune();
        prop_assert_eq!(sorted(raw.leaves()), sorted(pruned.leaves()));
        prop_assert_eq!(pruned.prune(), pruned.clone());
        prop_assert_eq!(pruned.root_id(), raw.root_id());
    }

    #[test]
    fn prune_keeps_or_nodes_and_removes_small_and_nodes(raw in tree()) {
        let pruned = raw.prune();
        for id in raw.ids() {
            if raw.kind(id).unwrap() == NodeKind::Or {
                prop_assert!(pruned.contains(id), "OR node {} removed", id);
            }
        }
        for id in pruned.internal_nodes() {
            if id != pruned.root_id() && pruned.kind(id).unwrap() == NodeKind::And {
                prop_assert!(pruned.children_labels(id).unwrap().len() >= 3, "{} kept with < 3 children", id);
            }
        }
    }

    #[test]
    fn prune_only_removes_ancestry(raw in tree()) {
        let pruned = raw.prune();
        for leaf in pruned.leaves() {
            for node in pruned.ids() {
                // kept ancestors stay ancestors, and no new ones appear
                prop_assert_eq!(
                    pruned.is_descendant(leaf, node).unwrap(),
                    raw.is_descendant(leaf, node).unwrap(),
                    "leaf {} node {}", leaf, node
                );
            }
        }
    }

    #[test]
    fn flatten_puts_every_leaf_under_the_root(raw in tree()) {
        let flat = raw.flatten();
        prop_assert_eq!(flat.len(), raw.leaves().len() + 1);
        for leaf in raw.leaves() {
            prop_assert_eq!(flat.parent(leaf).unwrap(), Some(raw.root_id()));
        }
    }

    #[test]
    fn json_roundtrip(raw in tree()) {
        let text = serde_json::to_string(&raw).unwrap();
        let back: LabelTree = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, raw);
    }
}
