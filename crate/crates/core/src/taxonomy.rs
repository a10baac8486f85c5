//! Topic hierarchy: a rooted tree of named topics with term sets.
//!
//! Every mutating operation returns a new [`Taxonomy`]; values are never
//! modified in place.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::tokenize;
use crate::error::{Error, Result};

const MAX_NAME_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicNode {
    pub id: u32,
    pub name: Vec<String>,
    /// Ordered, duplicate-free term list.
    pub terms: Vec<Vec<String>>,
    pub is_virtual: bool,
}

impl TopicNode {
    pub fn name_text(&self) -> String {
        self.name.join(" ")
    }

    pub fn term_texts(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.join(" ")).collect()
    }
}

/// A topic to insert: tokenized name plus term token lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewTopic {
    pub name: Vec<String>,
    pub terms: Vec<Vec<String>>,
}

impl NewTopic {
    pub fn from_text(name: &str, terms: &[String]) -> Self {
        Self {
            name: tokenize(name, MAX_NAME_TOKENS),
            terms: terms
                .iter()
                .map(|t| tokenize(t, MAX_NAME_TOKENS))
                .filter(|t| !t.is_empty())
                .collect(),
        }
    }
}

impl From<(String, Vec<String>)> for NewTopic {
    fn from((name, terms): (String, Vec<String>)) -> Self {
        Self::from_text(&name, &terms)
    }
}

fn dedup_terms(terms: Vec<Vec<String>>) -> Vec<Vec<String>> {
    let mut seen = BTreeSet::new();
    terms
        .into_iter()
        .filter(|t| !t.is_empty() && seen.insert(t.clone()))
        .collect()
}

/// A topic removed by [`Taxonomy::delete_random_leaves`], kept as ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeletedTopic {
    pub node: TopicNode,
    pub parent_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    nodes: BTreeMap<u32, TopicNode>,
    parent: BTreeMap<u32, u32>,
    children: BTreeMap<u32, Vec<u32>>,
    root: u32,
    next_id: u32,
}

impl Taxonomy {
    pub fn with_root(name: &str, terms: Vec<String>) -> Self {
        let t = NewTopic::from_text(name, &terms);
        Self::from_root_node(t.name, t.terms)
    }

    fn from_root_node(name: Vec<String>, terms: Vec<Vec<String>>) -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(
            0,
            TopicNode {
                id: 0,
                name,
                terms: dedup_terms(terms),
                is_virtual: false,
            },
        );
        let mut children = BTreeMap::new();
        children.insert(0, Vec::new());
        Self {
            nodes,
            parent: BTreeMap::new(),
            children,
            root: 0,
            next_id: 1,
        }
    }

    pub fn root_id(&self) -> u32 {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn get(&self, id: u32) -> Result<&TopicNode> {
        self.nodes.get(&id).ok_or(Error::UnknownTopic(id))
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &TopicNode> {
        self.nodes.values()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.nodes.keys().copied().collect()
    }

    pub fn parent(&self, id: u32) -> Option<u32> {
        self.parent.get(&id).copied()
    }

    pub fn children(&self, id: u32) -> &[u32] {
        self.children.get(&id).map_or(&[], Vec::as_slice)
    }

    pub fn depth(&self, id: u32) -> usize {
        let mut d = 0;
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            d += 1;
            cur = p;
        }
        d
    }

    /// Non-root nodes without children, ascending id.
    pub fn leaves(&self) -> Vec<u32> {
        self.nodes
            .keys()
            .copied()
            .filter(|&id| id != self.root && self.children(id).is_empty())
            .collect()
    }

    /// Tree edges as (parent, child) pairs.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.children
            .iter()
            .flat_map(|(&p, cs)| cs.iter().map(move |&c| (p, c)))
    }

    fn attach(&mut self, parent_id: u32, node: TopicNode) -> u32 {
        let id = node.id;
        self.next_id = self.next_id.max(id + 1);
        self.nodes.insert(id, node);
        self.parent.insert(id, parent_id);
        self.children.insert(id, Vec::new());
        self.children.entry(parent_id).or_default().push(id);
        id
    }

    /// Adds a nameless, childless virtual child under `parent_id`.
    pub fn insert_virtual_child(&self, parent_id: u32) -> Result<(Taxonomy, u32)> {
        self.get(parent_id)?;
        let mut t = self.clone();
        let id = t.next_id;
        t.attach(
            parent_id,
            TopicNode {
                id,
                name: Vec::new(),
                terms: Vec::new(),
                is_virtual: true,
            },
        );
        Ok((t, id))
    }

    /// Adds each topic as a non-virtual child of `parent_id`, with fresh ids
    /// in list order.
    pub fn insert_topics<T: Clone + Into<NewTopic>>(&self, parent_id: u32, topics: &[T]) -> Result<Taxonomy> {
        self.get(parent_id)?;
        let mut t = self.clone();
        for topic in topics {
            let topic: NewTopic = topic.clone().into();
            if topic.name.is_empty() {
                return Err(Error::Taxonomy {
                    node: format!("new child of {parent_id}"),
                    reason: "empty topic name".into(),
                });
            }
            let id = t.next_id;
            t.attach(
                parent_id,
                TopicNode {
                    id,
                    name: topic.name,
                    terms: dedup_terms(topic.terms),
                    is_virtual: false,
                },
            );
        }
        Ok(t)
    }

    /// Removes a childless non-root node.
    pub fn remove_leaf(&self, id: u32) -> Result<Taxonomy> {
        self.get(id)?;
        if id == self.root || !self.children(id).is_empty() {
            return Err(Error::Taxonomy {
                node: id.to_string(),
                reason: "only non-root leaves can be removed".into(),
            });
        }
        let mut t = self.clone();
        t.nodes.remove(&id);
        t.children.remove(&id);
        if let Some(p) = t.parent.remove(&id) {
            if let Some(cs) = t.children.get_mut(&p) {
                cs.retain(|&c| c != id);
            }
        }
        Ok(t)
    }

    /// Removes `floor(fraction * #leaves)` leaves chosen uniformly under `seed`.
    pub fn delete_random_leaves(&self, fraction: f64, seed: u64) -> Result<(Taxonomy, Vec<DeletedTopic>)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("leaf deletion fraction {fraction} outside [0, 1]")));
        }
        let leaves = self.leaves();
        let count = (fraction * leaves.len() as f64).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<u32> = rand::seq::index::sample(&mut rng, leaves.len(), count)
            .into_iter()
            .map(|i| leaves[i])
            .collect();
        picked.sort_unstable();
        let mut t = self.clone();
        let mut deleted = Vec::with_capacity(picked.len());
        for id in picked {
            deleted.push(DeletedTopic {
                node: t.get(id)?.clone(),
                parent_id: t.parent(id).expect("leaf has parent"),
            });
            t = t.remove_leaf(id)?;
        }
        Ok((t, deleted))
    }

    /// Checks single root, acyclicity, reachability and parent/child consistency.
    pub fn validate(&self) -> Result<()> {
        let err = |node: u32, reason: &str| Error::Taxonomy {
            node: node.to_string(),
            reason: reason.to_string(),
        };
        if !self.nodes.contains_key(&self.root) || self.parent.contains_key(&self.root) {
            return Err(err(self.root, "invalid root"));
        }
        for (&id, node) in &self.nodes {
            if node.id != id {
                return Err(err(id, "id mismatch"));
            }
            if node.is_virtual {
                if !node.name.is_empty() || !node.terms.is_empty() {
                    return Err(err(id, "virtual node carries a name or terms"));
                }
            } else if node.name.is_empty() {
                return Err(err(id, "empty name"));
            }
            if id != self.root {
                let p = self.parent(id).ok_or_else(|| err(id, "orphan node"))?;
                if !self.children(p).contains(&id) {
                    return Err(err(id, "parent does not list node as child"));
                }
            }
        }
        for (&p, cs) in &self.children {
            for c in cs {
                if self.parent(*c) != Some(p) {
                    return Err(err(*c, "child lists a different parent"));
                }
            }
        }
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([self.root]);
        while let Some(id) = queue.pop_front() {
            if !seen.insert(id) {
                return Err(err(id, "cycle"));
            }
            queue.extend(self.children(id));
        }
        if let Some(&id) = self.nodes.keys().find(|id| !seen.contains(id)) {
            return Err(err(id, "unreachable from root"));
        }
        Ok(())
    }

    /// Equality ignoring ids and sibling order.
    pub fn structurally_equal(&self, other: &Taxonomy) -> bool {
        self.canonical(self.root) == other.canonical(other.root)
    }

    fn canonical(&self, id: u32) -> String {
        let node = &self.nodes[&id];
        let mut terms: Vec<String> = node.term_texts();
        terms.sort();
        let mut kids: Vec<String> = self.children(id).iter().map(|&c| self.canonical(c)).collect();
        kids.sort();
        format!(
            "({}|{}|{}|[{}])",
            node.name_text(),
            node.is_virtual,
            terms.join(","),
            kids.join(",")
        )
    }

    /// Writes one JSON record per line in ascending id order; virtual nodes
    /// are skipped. Reloading a taxonomy with contiguous ids reproduces them.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for (&id, node) in self.nodes.iter().filter(|(_, n)| !n.is_virtual) {
            let rec = TaxonomyRecord {
                id: id as i64,
                parent_id: self.parent(id).map(i64::from),
                name: node.name_text(),
                terms: node.term_texts(),
            };
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Parses line records, assigning canonical ids in file order.
    pub fn read_from<R: BufRead>(r: R) -> Result<Taxonomy> {
        let mut records = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TaxonomyRecord = serde_json::from_str(&line).map_err(|e| Error::Taxonomy {
                node: format!("line {}", n + 1),
                reason: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    pub fn load(path: &Path) -> Result<Taxonomy> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    fn from_records(records: Vec<TaxonomyRecord>) -> Result<Taxonomy> {
        let err = |node: i64, reason: &str| Error::Taxonomy {
            node: node.to_string(),
            reason: reason.to_string(),
        };
        let mut canonical: HashMap<i64, u32> = HashMap::new();
        for (i, rec) in records.iter().enumerate() {
            if canonical.insert(rec.id, i as u32).is_some() {
                return Err(err(rec.id, "duplicate id"));
            }
        }
        let roots: Vec<&TaxonomyRecord> = records.iter().filter(|r| r.parent_id.is_none()).collect();
        match roots.len() {
            0 => return Err(err(records.first().map_or(-1, |r| r.id), "no root")),
            1 => {}
            _ => return Err(err(roots[1].id, "multiple roots")),
        }
        for rec in &records {
            if let Some(p) = rec.parent_id {
                if !canonical.contains_key(&p) {
                    return Err(err(rec.id, "orphan node: parent does not exist"));
                }
            }
        }
        // a node whose ancestor chain never reaches the root sits on a cycle
        for rec in &records {
            let mut cur = rec.id;
            let mut steps = 0;
            while let Some(p) = records[canonical[&cur] as usize].parent_id {
                cur = p;
                steps += 1;
                if steps > records.len() {
                    return Err(err(rec.id, "cycle"));
                }
            }
        }
        let root_rec = roots[0];
        let root_topic = NewTopic::from_text(&root_rec.name, &root_rec.terms);
        if root_topic.name.is_empty() {
            return Err(err(root_rec.id, "empty name"));
        }
        let mut t = Self::from_root_node(root_topic.name, root_topic.terms);
        let root_canon = canonical[&root_rec.id];
        if root_canon != 0 {
            t = t.relabel_root(root_canon);
        }
        // attach in an order where parents precede children
        let mut pending: Vec<&TaxonomyRecord> = records.iter().filter(|r| r.parent_id.is_some()).collect();
        while !pending.is_empty() {
            let before = pending.len();
            let mut rest = Vec::new();
            for rec in pending {
                let p = canonical[&rec.parent_id.expect("non-root")];
                if !t.nodes.contains_key(&p) {
                    rest.push(rec);
                    continue;
                }
                let topic = NewTopic::from_text(&rec.name, &rec.terms);
                if topic.name.is_empty() {
                    return Err(err(rec.id, "empty name"));
                }
                t.attach(
                    p,
                    TopicNode {
                        id: canonical[&rec.id],
                        name: topic.name,
                        terms: dedup_terms(topic.terms),
                        is_virtual: false,
                    },
                );
            }
            if rest.len() == before {
                return Err(err(rest[0].id, "unreachable from root"));
            }
            pending = rest;
        }
        for cs in t.children.values_mut() {
            cs.sort_unstable();
        }
        t.next_id = records.len() as u32;
        t.validate()?;
        Ok(t)
    }

    fn relabel_root(mut self, id: u32) -> Self {
        let mut node = self.nodes.remove(&0).expect("root");
        node.id = id;
        self.nodes.insert(id, node);
        self.children.remove(&0);
        self.children.insert(id, Vec::new());
        self.root = id;
        self.next_id = self.next_id.max(id + 1);
        self
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyRecord {
    id: i64,
    parent_id: Option<i64>,
    name: String,
    #[serde(default)]
    terms: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topic(name: &str, terms: &[&str]) -> (String, Vec<String>) {
        (name.to_string(), terms.iter().map(|s| s.to_string()).collect())
    }

    fn three_level() -> Taxonomy {
        let t = Taxonomy::with_root("products", vec!["product".into()]);
        let t = t
            .insert_topics(0, &[topic("beauty", &["lipstick", "nail polish"]), topic("grocery", &["tea"])])
            .unwrap();
        t.insert_topics(1, &[topic("nail care", &["nail lacquer", "top coat"])]).unwrap()
    }

    #[test]
    fn virtual_child_under_chain_leaf() {
        let t = Taxonomy::with_root("root", vec![]);
        let t = t.insert_topics(0, &[topic("a", &[])]).unwrap();
        let (v, vid) = t.insert_virtual_child(1).unwrap();
        assert_eq!(v.children(1), &[vid]);
        assert!(v.get(vid).unwrap().is_virtual);
        assert!(v.children(vid).is_empty());
        assert_eq!(t.len(), 2, "input unchanged");
        v.validate().unwrap();
    }

    #[test]
    fn virtual_child_of_single_node() {
        let t = Taxonomy::with_root("root", vec![]);
        let (v, _) = t.insert_virtual_child(0).unwrap();
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn virtual_child_joins_siblings() {
        let t = Taxonomy::with_root("root", vec![]);
        let t = t
            .insert_topics(0, &[topic("a", &[]), topic("b", &[]), topic("c", &[])])
            .unwrap();
        let (v, vid) = t.insert_virtual_child(0).unwrap();
        assert_eq!(v.children(0).len(), 4);
        let siblings: Vec<_> = v.children(0).iter().filter(|&&c| c != vid).collect();
        assert_eq!(siblings.len(), 3);
        assert!(v.remove_leaf(vid).unwrap().structurally_equal(&t));
    }

    #[test]
    fn virtual_child_unknown_parent() {
        let t = Taxonomy::with_root("root", vec![]);
        assert!(matches!(t.insert_virtual_child(9), Err(Error::UnknownTopic(9))));
    }

    #[test]
    fn insert_topics_counts_and_ids() {
        let t = Taxonomy::with_root("root", vec![]);
        let five: Vec<_> = (0..5).map(|i| topic(&format!("t{i}"), &["x"])).collect();
        let t2 = t.insert_topics(0, &five).unwrap();
        assert_eq!(t2.children(0).len(), 5);
        assert_eq!(t.insert_topics::<(String, Vec<String>)>(0, &[]).unwrap(), t);
        let t3 = t2.insert_topics(0, &[topic("late", &[])]).unwrap();
        let ids = t3.children(0).to_vec();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!(t.insert_topics(4, &[topic("x", &[])]).is_err());
        assert!(t.insert_topics(0, &[topic("!!", &[])]).is_err());
    }

    #[test]
    fn leaf_deletion_counts() {
        let t = Taxonomy::with_root("root", vec![]);
        let leaves: Vec<_> = (0..8).map(|i| topic(&format!("l{i}"), &[])).collect();
        let t = t.insert_topics(0, &leaves).unwrap();
        let (p, d) = t.delete_random_leaves(0.5, 11).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(p.len(), 5);
        p.validate().unwrap();
        let (_, none) = t.delete_random_leaves(0.0, 11).unwrap();
        assert!(none.is_empty());
        let (p2, d2) = t.delete_random_leaves(0.5, 11).unwrap();
        assert!(d.iter().all(|x| x.parent_id == 0));
        assert_eq!((p2, d2), (p, d));
    }

    #[test]
    fn round_trip_three_levels() {
        let t = three_level();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        let back = Taxonomy::read_from(buf.as_slice()).unwrap();
        assert!(back.structurally_equal(&t));
        back.validate().unwrap();
    }

    #[test]
    fn virtual_nodes_are_not_serialized() {
        let (v, _) = three_level().insert_virtual_child(0).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let back = Taxonomy::read_from(buf.as_slice()).unwrap();
        assert!(back.structurally_equal(&three_level()));
    }

    fn parse(lines: &[&str]) -> Result<Taxonomy> {
        Taxonomy::read_from(lines.join("\n").as_bytes())
    }

    #[test]
    fn parse_errors_name_the_node() {
        let two_roots = parse(&[
            r#"{"id": 1, "parent_id": null, "name": "a", "terms": []}"#,
            r#"{"id": 2, "parent_id": null, "name": "b", "terms": []}"#,
        ])
        .unwrap_err();
        assert!(two_roots.to_string().contains("multiple roots"), "{two_roots}");
        assert!(two_roots.to_string().contains("node 2"));

        let orphan = parse(&[
            r#"{"id": 1, "parent_id": null, "name": "a", "terms": []}"#,
            r#"{"id": 2, "parent_id": 7, "name": "b", "terms": []}"#,
        ])
        .unwrap_err();
        assert!(orphan.to_string().contains("orphan"), "{orphan}");

        let cycle = parse(&[
            r#"{"id": 1, "parent_id": null, "name": "a", "terms": []}"#,
            r#"{"id": 2, "parent_id": 3, "name": "b", "terms": []}"#,
            r#"{"id": 3, "parent_id": 2, "name": "c", "terms": []}"#,
        ])
        .unwrap_err();
        assert!(cycle.to_string().contains("cycle"), "{cycle}");
    }

    #[test]
    fn canonical_ids_follow_file_order() {
        let t = parse(&[
            r#"{"id": 50, "parent_id": 10, "name": "child", "terms": ["x y"]}"#,
            r#"{"id": 10, "parent_id": null, "name": "root", "terms": []}"#,
        ])
        .unwrap();
        assert_eq!(t.root_id(), 1);
        assert_eq!(t.children(1), &[0]);
        assert_eq!(t.get(0).unwrap().terms, vec![vec!["x".to_string(), "y".to_string()]]);
        let (t2, vid) = t.insert_virtual_child(1).unwrap();
        assert_eq!(vid, 2);
        t2.validate().unwrap();
    }

    #[test]
    fn save_load_keeps_ids_after_insertion() {
        let t = parse(&[
            r#"{"id": 0, "parent_id": null, "name": "root", "terms": []}"#,
            r#"{"id": 1, "parent_id": 0, "name": "a", "terms": ["a"]}"#,
            r#"{"id": 2, "parent_id": 1, "name": "b", "terms": ["b"]}"#,
        ])
        .unwrap();
        let grown = t.insert_topics(0, &[NewTopic::from_text("c", &["c".into()])]).unwrap();
        let mut buf = Vec::new();
        grown.write_to(&mut buf).unwrap();
        let back = Taxonomy::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.ids(), grown.ids());
        for id in grown.ids() {
            assert_eq!(back.get(id).unwrap().name, grown.get(id).unwrap().name);
            assert_eq!(back.parent(id), grown.parent(id));
        }
    }

    #[test]
    fn large_flat_taxonomy_loads() {
        let mut lines = vec![r#"{"id": 0, "parent_id": null, "name": "root", "terms": []}"#.to_string()];
        for i in 1..531 {
            let parent = if i <= 30 { 0 } else { 1 + (i % 30) };
            lines.push(format!(
                r#"{{"id": {i}, "parent_id": {parent}, "name": "topic {i}", "terms": ["term {i}"]}}"#
            ));
        }
        let t = Taxonomy::read_from(lines.join("\n").as_bytes()).unwrap();
        assert_eq!(t.len(), 531);
    }
}
