//! In-memory triple store: loading, topic-entity neighbourhood expansion and
//! answer-aspect extraction.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::KbError;

/// Dense id into the shared entity/relation vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResourceId(pub u32);

impl ResourceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Stands in for the type aspect of an entity with no type fact.
pub const NO_TYPE: ResourceId = ResourceId(0);
/// Stands in for the context aspect of an entity with no other neighbours.
pub const NO_CONTEXT: ResourceId = ResourceId(1);

const NO_TYPE_SURFACE: &str = "<NO_TYPE>";
const NO_CONTEXT_SURFACE: &str = "<NO_CONTEXT>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResourceKind {
    Entity,
    Relation,
    Sentinel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resource {
    pub surface: String,
    pub kind: ResourceKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fact {
    pub subject: ResourceId,
    pub relation: ResourceId,
    pub object: ResourceId,
}

impl Fact {
    pub fn new(subject: ResourceId, relation: ResourceId, object: ResourceId) -> Self {
        Fact { subject, relation, object }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbOptions {
    /// Surface form of the relation that marks type facts.
    pub type_relation: String,
    /// Maximum number of context entities kept per candidate.
    pub context_cap: usize,
    /// Do not walk type facts when expanding candidates or collecting context.
    pub skip_type_edges: bool,
}

impl Default for KbOptions {
    fn default() -> Self {
        KbOptions { type_relation: "type".into(), context_cap: 64, skip_type_edges: true }
    }
}

/// One candidate answer with its four aspects.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CandidateAnswer {
    pub answer: ResourceId,
    /// One or two relations leading from the topic entity to `answer`.
    pub relation_path: Vec<ResourceId>,
    pub types: Vec<ResourceId>,
    pub context: Vec<ResourceId>,
}

impl CandidateAnswer {
    pub fn hops(&self) -> usize {
        self.relation_path.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    pub topic: Option<ResourceId>,
    pub candidates: Vec<CandidateAnswer>,
    /// Set when the requested topic is not an entity of the store.
    pub unknown_topic: bool,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn entities(&self) -> impl Iterator<Item = ResourceId> + '_ {
        self.candidates.iter().map(|c| c.answer)
    }
}

#[derive(Clone, Debug)]
pub struct KbStore {
    resources: Vec<Resource>,
    entity_ids: HashMap<String, ResourceId>,
    relation_ids: HashMap<String, ResourceId>,
    facts: Vec<Fact>,
    fact_set: HashSet<Fact>,
    by_subject: Vec<Vec<usize>>,
    by_object: Vec<Vec<usize>>,
    type_relation: Option<ResourceId>,
    options: KbOptions,
}

impl KbStore {
    pub fn new(options: KbOptions) -> Self {
        let mut store = KbStore {
            resources: Vec::new(),
            entity_ids: HashMap::new(),
            relation_ids: HashMap::new(),
            facts: Vec::new(),
            fact_set: HashSet::new(),
            by_subject: Vec::new(),
            by_object: Vec::new(),
            type_relation: None,
            options,
        };
        for s in [NO_TYPE_SURFACE, NO_CONTEXT_SURFACE] {
            store.push_resource(s, ResourceKind::Sentinel);
        }
        store
    }

    /// Reads a tab-separated triple file. `#` lines and blank lines are skipped.
    pub fn load_triples(path: impl AsRef<Path>, options: KbOptions) -> Result<Self, KbError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KbError::io(path, e))?;
        Self::parse_triples(&text, &path.display().to_string(), options)
    }

    pub fn parse_triples(text: &str, source: &str, options: KbOptions) -> Result<Self, KbError> {
        let mut store = KbStore::new(options);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(KbError::MalformedTriple { path: source.to_string(), line: i + 1, fields: fields.len() });
            }
            store.insert(fields[0], fields[1], fields[2]);
        }
        Ok(store)
    }

    fn push_resource(&mut self, surface: &str, kind: ResourceKind) -> ResourceId {
        let id = ResourceId(self.resources.len() as u32);
        self.resources.push(Resource { surface: surface.to_string(), kind });
        self.by_subject.push(Vec::new());
        self.by_object.push(Vec::new());
        id
    }

    fn intern(&mut self, surface: &str, kind: ResourceKind) -> ResourceId {
        let existing = match kind {
            ResourceKind::Relation => self.relation_ids.get(surface),
            _ => self.entity_ids.get(surface),
        };
        if let Some(&id) = existing {
            return id;
        }
        let id = self.push_resource(surface, kind);
        match kind {
            ResourceKind::Relation => {
                self.relation_ids.insert(surface.to_string(), id);
                if surface == self.options.type_relation {
                    self.type_relation = Some(id);
                }
            }
            _ => {
                self.entity_ids.insert(surface.to_string(), id);
            }
        }
        id
    }

    /// Adds a fact by surface forms; duplicates are ignored.
    pub fn insert(&mut self, subject: &str, relation: &str, object: &str) -> Fact {
        let s = self.intern(subject, ResourceKind::Entity);
        let r = self.intern(relation, ResourceKind::Relation);
        let o = self.intern(object, ResourceKind::Entity);
        let fact = Fact::new(s, r, o);
        if self.fact_set.insert(fact) {
            let idx = self.facts.len();
            self.facts.push(fact);
            self.by_subject[s.index()].push(idx);
            self.by_object[o.index()].push(idx);
        }
        fact
    }

    pub fn options(&self) -> &KbOptions {
        &self.options
    }

    pub fn facts(&self) -> &[Fact] {
        &self.facts
    }

    pub fn contains(&self, fact: &Fact) -> bool {
        self.fact_set.contains(fact)
    }

    /// Size of the shared KB vocabulary, sentinels included.
    pub fn vocab_size(&self) -> usize {
        self.resources.len()
    }

    pub fn resource(&self, id: ResourceId) -> &Resource {
        &self.resources[id.index()]
    }

    pub fn resources(&self) -> &[Resource] {
        &self.resources
    }

    pub fn surface(&self, id: ResourceId) -> &str {
        &self.resources[id.index()].surface
    }

    pub fn entity(&self, surface: &str) -> Option<ResourceId> {
        self.entity_ids.get(surface).copied()
    }

    pub fn relation(&self, surface: &str) -> Option<ResourceId> {
        self.relation_ids.get(surface).copied()
    }

    pub fn type_relation(&self) -> Option<ResourceId> {
        self.type_relation
    }

    pub fn is_entity(&self, id: ResourceId) -> bool {
        self.resources.get(id.index()).is_some_and(|r| r.kind == ResourceKind::Entity)
    }

    pub fn entities(&self) -> impl Iterator<Item = ResourceId> + '_ {
        self.ids_of(ResourceKind::Entity)
    }

    pub fn relations(&self) -> impl Iterator<Item = ResourceId> + '_ {
        self.ids_of(ResourceKind::Relation)
    }

    fn ids_of(&self, kind: ResourceKind) -> impl Iterator<Item = ResourceId> + '_ {
        self.resources
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.kind == kind)
            .map(|(i, _)| ResourceId(i as u32))
    }

    pub fn facts_with_subject(&self, e: ResourceId) -> impl Iterator<Item = &Fact> + '_ {
        self.by_subject.get(e.index()).into_iter().flatten().map(|&i| &self.facts[i])
    }

    pub fn facts_with_object(&self, e: ResourceId) -> impl Iterator<Item = &Fact> + '_ {
        self.by_object.get(e.index()).into_iter().flatten().map(|&i| &self.facts[i])
    }

    fn is_type_fact(&self, f: &Fact) -> bool {
        Some(f.relation) == self.type_relation
    }

    /// `(relation, neighbour)` pairs over facts in either direction,
    /// outgoing facts first, each side in load order.
    pub fn neighbors(&self, e: ResourceId) -> impl Iterator<Item = (ResourceId, ResourceId)> + '_ {
        let skip = self.options.skip_type_edges;
        let out = self.facts_with_subject(e).map(|f| (f, f.object));
        let inc = self.facts_with_object(e).map(|f| (f, f.subject));
        out.chain(inc)
            .filter(move |(f, _)| !(skip && self.is_type_fact(f)))
            .map(|(f, other)| (f.relation, other))
    }

    /// Entities within `max_hops` (1 or 2) of `topic`, each paired with the
    /// relations walked to reach it. One-hop candidates come first.
    pub fn candidate_set(&self, topic: ResourceId, max_hops: usize) -> CandidateSet {
        if !self.is_entity(topic) {
            log::warn!("candidate generation: unknown topic entity {topic}");
            return CandidateSet { topic: None, candidates: Vec::new(), unknown_topic: true };
        }
        let mut seen: HashSet<(ResourceId, Vec<ResourceId>)> = HashSet::new();
        let mut paths: Vec<(ResourceId, Vec<ResourceId>)> = Vec::new();
        let first: Vec<(ResourceId, ResourceId)> = self.neighbors(topic).collect();
        for &(r1, x) in &first {
            if x != topic && seen.insert((x, vec![r1])) {
                paths.push((x, vec![r1]));
            }
        }
        if max_hops >= 2 {
            for &(r1, x) in &first {
                for (r2, y) in self.neighbors(x) {
                    let key = (y, vec![r1, r2]);
                    if y != topic && !seen.contains(&key) {
                        seen.insert(key.clone());
                        paths.push(key);
                    }
                }
            }
        }
        let candidates = paths
            .into_iter()
            .map(|(answer, path)| self.aspects_of(answer, path, Some(topic)))
            .collect();
        CandidateSet { topic: Some(topic), candidates, unknown_topic: false }
    }

    /// Builds the four aspects of `answer` reached from `topic` via `relation_path`.
    pub fn aspects_of(
        &self,
        answer: ResourceId,
        relation_path: Vec<ResourceId>,
        topic: Option<ResourceId>,
    ) -> CandidateAnswer {
        let mut types: Vec<ResourceId> = match self.type_relation {
            Some(tr) => self.facts_with_subject(answer).filter(|f| f.relation == tr).map(|f| f.object).collect(),
            None => Vec::new(),
        };
        types.sort();
        types.dedup();
        if types.is_empty() {
            types.push(NO_TYPE);
        }

        let mut context: Vec<ResourceId> = self
            .facts_with_subject(answer)
            .map(|f| (f, f.object))
            .chain(self.facts_with_object(answer).map(|f| (f, f.subject)))
            .filter(|(f, _)| !self.is_type_fact(f))
            .map(|(_, e)| e)
            .filter(|&e| e != answer && Some(e) != topic)
            .collect();
        context.sort();
        context.dedup();
        context.truncate(self.options.context_cap);
        if context.is_empty() {
            context.push(NO_CONTEXT);
        }

        CandidateAnswer { answer, relation_path, types, context }
    }

    /// Every entity reachable from `start` by walking `path` (either direction per hop).
    pub fn follow_path(&self, start: ResourceId, path: &[ResourceId]) -> HashSet<ResourceId> {
        let mut frontier: HashSet<ResourceId> = HashSet::from([start]);
        for &rel in path {
            frontier = frontier
                .iter()
                .flat_map(|&e| self.neighbors(e).filter(move |&(r, _)| r == rel).map(|(_, x)| x))
                .collect();
        }
        frontier
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(text: &str) -> KbStore {
        KbStore::parse_triples(text, "test", KbOptions::default()).unwrap()
    }

    fn id(s: &KbStore, name: &str) -> ResourceId {
        s.entity(name).or_else(|| s.relation(name)).unwrap()
    }

    #[test]
    fn load_single_and_duplicate() {
        let s = store("france\tcapital\tparis\n");
        assert_eq!(s.facts().len(), 1);
        assert_eq!(s.entities().count() + s.relations().count(), 3);

        let s = store("france\tcapital\tparis\nfrance\tcapital\tparis\n# comment\n\n");
        assert_eq!(s.facts().len(), 1);

        let empty = store("");
        assert!(empty.facts().is_empty());
        assert_eq!(empty.vocab_size(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = KbStore::parse_triples("a\tb\n", "kb.tsv", KbOptions::default()).unwrap_err();
        match err {
            KbError::MalformedTriple { line, fields, .. } => assert_eq!((line, fields), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
        let err = KbStore::parse_triples("a\tr\tb\nx\ty\n", "kb.tsv", KbOptions::default()).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn two_hop_expansion() {
        let s = store("a\tr1\tb\nb\tr2\tc\n");
        let cs = s.candidate_set(id(&s, "a"), 2);
        let got: Vec<(ResourceId, Vec<ResourceId>)> =
            cs.candidates.iter().map(|c| (c.answer, c.relation_path.clone())).collect();
        assert_eq!(
            got,
            vec![(id(&s, "b"), vec![id(&s, "r1")]), (id(&s, "c"), vec![id(&s, "r1"), id(&s, "r2")])]
        );
    }

    #[test]
    fn reverse_direction_and_isolated() {
        let s = store("a\tr1\tb\n");
        let cs = s.candidate_set(id(&s, "b"), 1);
        assert_eq!(cs.candidates.len(), 1);
        assert_eq!(cs.candidates[0].answer, id(&s, "a"));
        assert_eq!(cs.candidates[0].relation_path, vec![id(&s, "r1")]);

        let mut s = store("a\tr1\tb\n");
        s.intern("lonely", ResourceKind::Entity);
        let cs = s.candidate_set(id(&s, "lonely"), 2);
        assert!(cs.is_empty() && !cs.unknown_topic);

        let cs = s.candidate_set(ResourceId(999), 2);
        assert!(cs.is_empty() && cs.unknown_topic);
        let cs = s.candidate_set(id(&s, "r1"), 2);
        assert!(cs.unknown_topic);
    }

    #[test]
    fn aspects_types_and_context() {
        let s = store("x\ttype\tcountry\nx\tborders\ty\nt\tcapital\tx\nz\ttype\tcity\n");
        let x = id(&s, "x");
        let c = s.aspects_of(x, vec![id(&s, "capital")], Some(id(&s, "t")));
        assert_eq!(c.types, vec![id(&s, "country")]);
        assert_eq!(c.context, vec![id(&s, "y")]);

        let y = s.aspects_of(id(&s, "y"), vec![id(&s, "borders")], Some(x));
        assert_eq!(y.types, vec![NO_TYPE]);
        assert_eq!(y.context, vec![NO_CONTEXT]);
    }

    #[test]
    fn type_edges_are_not_candidates() {
        let s = store("a\ttype\tcountry\nb\ttype\tcountry\na\tr\tc\n");
        let cs = s.candidate_set(id(&s, "a"), 2);
        let answers: Vec<_> = cs.entities().collect();
        assert_eq!(answers, vec![id(&s, "c")]);
    }

    #[test]
    fn context_is_capped_by_ascending_id() {
        let mut text = String::new();
        for i in 0..10 {
            text.push_str(&format!("hub\tr\tn{i}\n"));
        }
        let opts = KbOptions { context_cap: 3, ..KbOptions::default() };
        let s = KbStore::parse_triples(&text, "t", opts).unwrap();
        let c = s.aspects_of(id(&s, "hub"), vec![id(&s, "r")], None);
        assert_eq!(c.context, vec![id(&s, "n0"), id(&s, "n1"), id(&s, "n2")]);
    }
}
