//! Synthetic multiple-choice benchmark over a generated graph.
//!
//! Nodes are pronounceable pseudo-words placed on a ring; every edge joins
//! two nodes at most `window` positions apart, so neighbourhoods are local
//! and overlap only with nearby centers. Each question names one entity and asks for the
//! partner of one of its edges. The four distractors are nodes with no path
//! of length ≤ 2 to the question entity, so only the graph tells them apart.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{normalize_tokens, parse_templates, KnowledgeGraph, NodeId};
use crate::query::{write_qa, QAInstance};
use crate::textualize::DEFAULT_TEMPLATES;

/// Word standing in for the answer slot of a question.
pub const QUESTION_WORD: &str = "what";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub nodes: usize,
    pub relations: usize,
    pub edges: usize,
    /// Maximum ring distance spanned by an edge.
    pub window: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub choices: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            nodes: 300,
            relations: 5,
            edges: 900,
            window: 4,
            train: 500,
            dev: 100,
            test: 200,
            choices: 5,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let available = parse_templates(DEFAULT_TEMPLATES, "default templates")?.len();
        if self.relations == 0 || self.relations > available {
            return Err(Error::Config(format!(
                "relation count must be in 1..={available}, got {}",
                self.relations
            )));
        }
        if self.window < 1 || 2 * self.window >= self.nodes {
            return Err(Error::Config(format!(
                "window must be in 1..{}, got {}",
                self.nodes.div_ceil(2),
                self.window
            )));
        }
        // the ring itself is laid down first
        let max_edges = self.nodes * self.window;
        if self.edges < self.nodes || self.edges > max_edges {
            return Err(Error::Config(format!(
                "edge count must be in {}..={max_edges}, got {}",
                self.nodes, self.edges
            )));
        }
        if self.choices < 2 {
            return Err(Error::Config("need at least 2 choices".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub triples: Vec<(String, String, String)>,
    pub templates: Vec<(String, String)>,
    pub graph: KnowledgeGraph,
    pub train: Vec<QAInstance>,
    pub dev: Vec<QAInstance>,
    pub test: Vec<QAInstance>,
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "dr",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_words(count: usize, reserved: &HashSet<String>, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if !reserved.contains(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Nodes within `radius` hops of `start`, ignoring edge direction.
pub fn ball(graph: &KnowledgeGraph, start: NodeId, radius: usize) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([(start, 0usize)]);
    while let Some((u, depth)) = queue.pop_front() {
        if depth == radius {
            continue;
        }
        for nb in graph.neighbors(u) {
            if seen.insert(nb.node) {
                queue.push_back((nb.node, depth + 1));
            }
        }
    }
    seen
}

pub fn generate_benchmark(config: &BenchmarkConfig) -> Result<SyntheticBenchmark> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut all_templates = parse_templates(DEFAULT_TEMPLATES, "default templates")?;
    all_templates.shuffle(&mut rng);
    all_templates.truncate(config.relations);
    all_templates.sort();
    let templates = all_templates;

    let mut reserved: HashSet<String> = templates
        .iter()
        .flat_map(|(_, t)| normalize_tokens(t))
        .collect();
    reserved.insert(QUESTION_WORD.to_string());
    let names = pseudo_words(config.nodes, &reserved, &mut rng);

    let mut pairs: HashSet<(usize, usize)> = HashSet::new();
    let mut edges: Vec<(usize, usize, usize)> = Vec::with_capacity(config.edges);
    let mut add = |a: usize, b: usize, rng: &mut ChaCha8Rng, edges: &mut Vec<_>| -> bool {
        let key = (a.min(b), a.max(b));
        if a == b || !pairs.insert(key) {
            return false;
        }
        let rel = rng.gen_range(0..templates.len());
        let (h, t) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        edges.push((h, rel, t));
        true
    };
    let n = config.nodes;
    for i in 0..n {
        add(i, (i + 1) % n, &mut rng, &mut edges);
    }
    while edges.len() < config.edges {
        let a = rng.gen_range(0..n);
        let offset = rng.gen_range(2..=config.window.max(2));
        add(a, (a + offset) % n, &mut rng, &mut edges);
    }
    edges.shuffle(&mut rng);

    let uri = |i: usize| format!("/c/en/{}", names[i]);
    let triples: Vec<(String, String, String)> = edges
        .iter()
        .map(|&(h, r, t)| (uri(h), templates[r].0.clone(), uri(t)))
        .collect();
    let graph = KnowledgeGraph::from_records(&triples, &templates)?;

    let total = config.train + config.dev + config.test;
    let mut instances = Vec::with_capacity(total);
    for i in 0..total {
        instances.push(make_instance(&graph, config.choices, &mut rng, i)?);
    }
    let test = instances.split_off(config.train + config.dev);
    let dev = instances.split_off(config.train);
    Ok(SyntheticBenchmark {
        triples,
        templates,
        graph,
        train: instances,
        dev,
        test,
    })
}

fn make_instance(
    graph: &KnowledgeGraph,
    choices: usize,
    rng: &mut ChaCha8Rng,
    index: usize,
) -> Result<QAInstance> {
    for _ in 0..1000 {
        let ti = rng.gen_range(0..graph.num_triples());
        let triple = graph.triple(ti);
        let template = &graph.relation(triple.relation).template;
        let (entity, answer, question) = if rng.gen_bool(0.5) {
            let q = template.render(&graph.node(triple.head).surface, QUESTION_WORD);
            (triple.head, triple.tail, q)
        } else {
            let q = template.render(QUESTION_WORD, &graph.node(triple.tail).surface);
            (triple.tail, triple.head, q)
        };
        let near = ball(graph, entity, 2);
        let far: Vec<NodeId> = (0..graph.num_nodes()).filter(|n| !near.contains(n)).collect();
        if far.len() < choices - 1 {
            continue;
        }
        let mut options: Vec<NodeId> = far.choose_multiple(rng, choices - 1).copied().collect();
        options.push(answer);
        options.shuffle(rng);
        let answer_index = options.iter().position(|&n| n == answer);
        return Ok(QAInstance {
            id: format!("q{index:05}"),
            question: format!("{question}?"),
            choices: options
                .iter()
                .map(|&n| graph.node(n).surface.clone())
                .collect(),
            answer_index,
        });
    }
    Err(Error::Config(
        "graph too dense to find distractors outside two hops".into(),
    ))
}

pub const TRIPLES_FILE: &str = "triples.tsv";
pub const TEMPLATES_FILE: &str = "templates.tsv";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const DEV_FILE: &str = "dev.jsonl";
pub const TEST_FILE: &str = "test.jsonl";

impl SyntheticBenchmark {
    /// Writes the graph, templates and the three QA splits into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.graph.write_triples(&dir.join(TRIPLES_FILE))?;
        self.graph.write_templates(&dir.join(TEMPLATES_FILE))?;
        write_qa(&dir.join(TRAIN_FILE), &self.train)?;
        write_qa(&dir.join(DEV_FILE), &self.dev)?;
        write_qa(&dir.join(TEST_FILE), &self.test)
    }
}

/// Checks the answerability contract of one instance against `graph`: the
/// question links to exactly one entity, the labelled choice lies within two
/// hops of it and every other choice lies outside.
pub fn check_instance(graph: &KnowledgeGraph, instance: &QAInstance) -> Result<()> {
    let fail = |why: &str| Err(Error::Config(format!("instance `{}`: {why}", instance.id)));
    let entities = graph.link_entities(&instance.question);
    if entities.len() != 1 {
        return fail("question must link to exactly one entity");
    }
    let entity = *entities.iter().next().expect("one entity");
    let Some(answer) = instance.answer_index else {
        return fail("missing answer");
    };
    let near = ball(graph, entity, 2);
    for (i, choice) in instance.choices.iter().enumerate() {
        let nodes = graph.nodes_by_surface(choice);
        if nodes.len() != 1 {
            return fail("choice is not a unique node");
        }
        if normalize_tokens(&instance.question).contains(choice) {
            return fail("choice appears in the question");
        }
        if near.contains(&nodes[0]) != (i == answer) {
            return fail("reachability does not match the label");
        }
    }
    Ok(())
}
