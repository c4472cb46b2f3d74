//! Grammatical evolution of CNN architectures.
//!
//! Integer genomes select productions of a BNF grammar in a leftmost
//! derivation. The derived token string is read as a network: convolutional
//! blocks with kernel, stride and pooling choices, a dense tail, and the
//! training hyperparameters. Fitness is validation accuracy after a short
//! training run.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::derive_seed;
use crate::nn::{ArchitectureSpec, LayerSpec, NnError};
use crate::optim::{self, OptimError, Split, TrainConfig};

#[derive(Debug, Error)]
pub enum GgpError {
    #[error("grammar: {0}")]
    Grammar(String),
    #[error("derivation ran out of codons after {wraps} wraps")]
    DerivationOverrun { wraps: usize },
    #[error("derived program is not a network: {0}")]
    Phenotype(String),
    #[error("{count} parameters exceed the cap of {max}")]
    TooManyParams { count: usize, max: usize },
    #[error("invalid evolution setting: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

pub type Result<T, E = GgpError> = std::result::Result<T, E>;

/// Built-in grammar: one to four convolutional blocks, a dense tail, and the
/// training hyperparameters.
pub const DEFAULT_GRAMMAR: &str = include_str!("../../../configs/ggp.bnf");

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Symbol {
    NonTerminal(String),
    Terminal(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    pub start: String,
    pub rules: BTreeMap<String, Vec<Vec<Symbol>>>,
}

impl Grammar {
    /// Parses `<lhs> ::= alt | alt` rules; a rule continues on following
    /// lines that do not start a new rule. `#` starts a comment. The first
    /// rule's left-hand side is the start symbol.
    pub fn parse(text: &str) -> Result<Self> {
        let mut order: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some((lhs, rhs)) = line.split_once("::=") {
                let lhs = lhs.trim();
                let name = lhs
                    .strip_prefix('<')
                    .and_then(|s| s.strip_suffix('>'))
                    .filter(|s| !s.is_empty())
                    .ok_or_else(|| GgpError::Grammar(format!("line {}: bad left-hand side {lhs:?}", n + 1)))?;
                order.push((name.to_string(), rhs.to_string()));
            } else {
                let last = order
                    .last_mut()
                    .ok_or_else(|| GgpError::Grammar(format!("line {}: continuation before any rule", n + 1)))?;
                last.1.push(' ');
                last.1.push_str(line);
            }
        }
        let start = order
            .first()
            .map(|(n, _)| n.clone())
            .ok_or_else(|| GgpError::Grammar("no rules".into()))?;
        let mut rules = BTreeMap::new();
        for (name, rhs) in order {
            let alts: Vec<Vec<Symbol>> = rhs
                .split('|')
                .map(|alt| {
                    alt.split_whitespace()
                        .map(|tok| match tok.strip_prefix('<').and_then(|s| s.strip_suffix('>')) {
                            Some(nt) => Symbol::NonTerminal(nt.to_string()),
                            None => Symbol::Terminal(tok.to_string()),
                        })
                        .collect()
                })
                .collect();
            if alts.iter().any(Vec::is_empty) {
                return Err(GgpError::Grammar(format!("rule <{name}> has an empty alternative")));
            }
            if rules.insert(name.clone(), alts).is_some() {
                return Err(GgpError::Grammar(format!("rule <{name}> defined twice")));
            }
        }
        for alts in rules.values() {
            for sym in alts.iter().flatten() {
                if let Symbol::NonTerminal(nt) = sym {
                    if !rules.contains_key(nt) {
                        return Err(GgpError::Grammar(format!("<{nt}> is referenced but has no rule")));
                    }
                }
            }
        }
        Ok(Self { start, rules })
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_GRAMMAR).expect("built-in grammar parses")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome {
    pub codons: Vec<u32>,
    pub wraps: usize,
}

pub const MIN_GENOME_LEN: usize = 16;

/// Upper bound on expansions, guarding against grammars that recurse
/// without consuming codons.
const MAX_EXPANSIONS: usize = 100_000;

/// Leftmost derivation. Each rule with `n > 1` alternatives consumes the
/// next codon and picks alternative `codon % n`; the codon list is reread
/// from the start at most `wraps` times.
pub fn derive_tokens(genome: &Genome, grammar: &Grammar) -> Result<Vec<String>> {
    if genome.codons.is_empty() {
        return Err(GgpError::DerivationOverrun { wraps: genome.wraps });
    }
    let mut stack = vec![Symbol::NonTerminal(grammar.start.clone())];
    let mut out = Vec::new();
    let mut used = 0usize;
    let limit = genome.codons.len() * (genome.wraps + 1);
    let mut expansions = 0;
    while let Some(sym) = stack.pop() {
        match sym {
            Symbol::Terminal(t) => out.push(t),
            Symbol::NonTerminal(nt) => {
                expansions += 1;
                if expansions > MAX_EXPANSIONS {
                    return Err(GgpError::DerivationOverrun { wraps: genome.wraps });
                }
                let alts = &grammar.rules[&nt];
                let pick = if alts.len() == 1 {
                    0
                } else {
                    if used == limit {
                        return Err(GgpError::DerivationOverrun { wraps: genome.wraps });
                    }
                    let c = genome.codons[used % genome.codons.len()];
                    used += 1;
                    c as usize % alts.len()
                };
                stack.extend(alts[pick].iter().rev().cloned());
            }
        }
    }
    Ok(out)
}

/// Network and training hyperparameters read from a derivation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub spec: ArchitectureSpec,
    pub learning_rate: f64,
    pub epochs: usize,
    pub fc_units: usize,
    /// `None` when the tail has no dropout layer.
    pub dropout: Option<f64>,
}

impl Derived {
    /// Training configuration with the genome's learning rate, the given
    /// epoch budget, and the rest from `base`.
    pub fn train_config(&self, base: &TrainConfig, epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs,
            fc_units: self.fc_units,
            drop_p: self.dropout.unwrap_or(1.0),
            ..base.clone()
        }
    }
}

pub fn block_filters(block: usize) -> usize {
    16 << block
}

pub const POOL: usize = 2;

struct Tokens<'a> {
    toks: &'a [String],
    at: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let t = self
            .toks
            .get(self.at)
            .ok_or_else(|| GgpError::Phenotype("unexpected end of program".into()))?;
        self.at += 1;
        Ok(t)
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.at).map(String::as_str)
    }

    fn expect(&mut self, word: &str) -> Result<()> {
        let t = self.next()?;
        if t != word {
            return Err(GgpError::Phenotype(format!("expected {word:?}, found {t:?}")));
        }
        Ok(())
    }

    fn number<T: std::str::FromStr>(&mut self) -> Result<T> {
        let t = self.next()?;
        t.parse()
            .map_err(|_| GgpError::Phenotype(format!("expected a number, found {t:?}")))
    }
}

/// Reads `conv k s bn relu (pool|nopool)` blocks, then
/// `flatten dense u relu (dropout p|nodropout) dense_out lr r epochs e`.
/// Block `i` gets `16 * 2^i` filters. The result is shape-checked.
pub fn phenotype(tokens: &[String], input_shape: &[usize]) -> Result<Derived> {
    let mut t = Tokens { toks: tokens, at: 0 };
    let mut layers = Vec::new();
    let mut block = 0;
    while t.peek() == Some("conv") {
        t.next()?;
        let kernel: usize = t.number()?;
        let stride: usize = t.number()?;
        t.expect("bn")?;
        t.expect("relu")?;
        layers.extend([
            LayerSpec::conv2d(block_filters(block), kernel, stride, 0),
            LayerSpec::batchnorm(),
            LayerSpec::Relu,
        ]);
        match t.next()? {
            "pool" => layers.push(LayerSpec::maxpool2d(POOL, POOL)),
            "nopool" => {}
            other => return Err(GgpError::Phenotype(format!("expected pool or nopool, found {other:?}"))),
        }
        block += 1;
    }
    if block == 0 {
        return Err(GgpError::Phenotype("no convolutional block".into()));
    }
    t.expect("flatten")?;
    t.expect("dense")?;
    let fc_units: usize = t.number()?;
    t.expect("relu")?;
    layers.extend([LayerSpec::Flatten, LayerSpec::dense(fc_units), LayerSpec::Relu]);
    let dropout = match t.next()? {
        "dropout" => {
            let p: f64 = t.number()?;
            layers.push(LayerSpec::Dropout { p });
            Some(p)
        }
        "nodropout" => None,
        other => return Err(GgpError::Phenotype(format!("expected dropout or nodropout, found {other:?}"))),
    };
    t.expect("dense_out")?;
    layers.push(LayerSpec::dense(2));
    t.expect("lr")?;
    let learning_rate: f64 = t.number()?;
    t.expect("epochs")?;
    let epochs: usize = t.number()?;
    if let Some(extra) = t.peek() {
        return Err(GgpError::Phenotype(format!("trailing token {extra:?}")));
    }
    let spec = ArchitectureSpec {
        input_shape: input_shape.to_vec(),
        classes: 2,
        layers,
    };
    spec.layer_shapes()?;
    Ok(Derived {
        spec,
        learning_rate,
        epochs,
        fc_units,
        dropout,
    })
}

pub fn derive_architecture(genome: &Genome, grammar: &Grammar, input_shape: &[usize]) -> Result<Derived> {
    phenotype(&derive_tokens(genome, grammar)?, input_shape)
}

/// Checks the tuning ranges: kernels 1..=5, strides 1..=3, and filter
/// counts starting at 16 and doubling per convolution.
pub fn conforms_to_ranges(spec: &ArchitectureSpec) -> bool {
    let mut block = 0;
    for l in &spec.layers {
        if let LayerSpec::Conv2d { filters, kernel, stride, .. } | LayerSpec::Conv3d { filters, kernel, stride, .. } = l {
            if !(1..=5).contains(kernel) || !(1..=3).contains(stride) || *filters != block_filters(block) {
                return false;
            }
            block += 1;
        }
    }
    block > 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub tournament_size: usize,
    pub elitism_count: usize,
    pub fitness_epochs: usize,
    pub genome_length: usize,
    pub wraps: usize,
    /// Codons are drawn uniformly from `0..codon_max`.
    pub codon_max: u32,
    /// Architectures above this many parameters score 0 without training.
    pub max_params: usize,
    pub seed: u64,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            generations: 10,
            crossover_rate: 0.9,
            mutation_rate: 0.05,
            tournament_size: 3,
            elitism_count: 1,
            fitness_epochs: 10,
            genome_length: 32,
            wraps: 2,
            codon_max: 256,
            max_params: 4_000_000,
            seed: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GgpError::InvalidConfig(msg));
        if self.population_size == 0 {
            return bad("population_size must be positive".into());
        }
        if self.elitism_count == 0 || self.elitism_count > self.population_size {
            return bad(format!(
                "elitism_count {} must be in 1..={}",
                self.elitism_count, self.population_size
            ));
        }
        for (name, r) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        if self.tournament_size == 0 {
            return bad("tournament_size must be positive".into());
        }
        if self.genome_length < MIN_GENOME_LEN {
            return bad(format!("genome_length {} < {MIN_GENOME_LEN}", self.genome_length));
        }
        if self.codon_max == 0 {
            return bad("codon_max must be positive".into());
        }
        Ok(())
    }
}

/// Why an individual scored zero without (complete) training.
#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    pub genome: Genome,
    pub reason: String,
}

/// Memoized fitness of genomes against fixed train/validation splits.
pub struct FitnessEvaluator<'a> {
    pub grammar: &'a Grammar,
    pub input_shape: Vec<usize>,
    pub train: &'a Split,
    pub val: &'a Split,
    pub fitness_epochs: usize,
    pub max_params: usize,
    pub base: TrainConfig,
    cache: HashMap<Vec<u32>, f64>,
    /// Number of training runs performed.
    pub trainings: usize,
    pub failures: Vec<Failure>,
}

impl<'a> FitnessEvaluator<'a> {
    pub fn new(grammar: &'a Grammar, train: &'a Split, val: &'a Split, fitness_epochs: usize, seed: u64) -> Self {
        let input_shape = train
            .items
            .first()
            .map(|s| {
                let [nx, ny, nz] = s.volume.dims();
                vec![nz, ny, nx]
            })
            .unwrap_or_default();
        Self {
            grammar,
            input_shape,
            train,
            val,
            fitness_epochs,
            max_params: EvolutionConfig::default().max_params,
            base: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            cache: HashMap::new(),
            trainings: 0,
            failures: Vec::new(),
        }
    }

    fn score(&mut self, genome: &Genome) -> Result<f64> {
        let derived = derive_architecture(genome, self.grammar, &self.input_shape)?;
        let count = derived.spec.param_count()?;
        if count > self.max_params {
            return Err(GgpError::TooManyParams {
                count,
                max: self.max_params,
            });
        }
        self.trainings += 1;
        let cfg = derived.train_config(&self.base, self.fitness_epochs);
        let outcome = optim::train(&derived.spec, self.train, self.val, &cfg)?;
        Ok(optim::evaluate(&outcome.model, self.val)?)
    }

    /// Validation accuracy in `[0, 1]`; 0 for genomes that do not derive,
    /// do not shape-check, exceed the parameter cap, or diverge.
    pub fn fitness(&mut self, genome: &Genome) -> f64 {
        if let Some(&f) = self.cache.get(&genome.codons) {
            return f;
        }
        let f = match self.score(genome) {
            Ok(f) => f,
            Err(e) => {
                self.failures.push(Failure {
                    genome: genome.clone(),
                    reason: e.to_string(),
                });
                0.0
            }
        };
        self.cache.insert(genome.codons.clone(), f);
        f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub genome: Genome,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub median: f64,
}

impl fmt::Display for GenerationStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.6},{:.6},{:.6}", self.generation, self.best, self.mean, self.median)
    }
}

pub fn evolution_csv(log: &[GenerationStats]) -> String {
    let mut s = String::from("generation,best,mean,median\n");
    for g in log {
        s.push_str(&format!("{g}\n"));
    }
    s
}

pub struct EvolutionOutcome {
    pub best: Individual,
    pub population: Vec<Individual>,
    pub log: Vec<GenerationStats>,
    pub trainings: usize,
    pub failures: Vec<Failure>,
}

fn stats(generation: usize, pop: &[Individual]) -> GenerationStats {
    let mut f: Vec<f64> = pop.iter().map(|i| i.fitness).collect();
    f.sort_by(f64::total_cmp);
    let n = f.len();
    let median = if n % 2 == 1 { f[n / 2] } else { (f[n / 2 - 1] + f[n / 2]) / 2.0 };
    GenerationStats {
        generation,
        best: f[n - 1],
        mean: f.iter().sum::<f64>() / n as f64,
        median,
    }
}

/// Indices sorted by fitness, best first; ties keep population order.
fn ranking(pop: &[Individual]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pop.len()).collect();
    idx.sort_by(|&a, &b| pop[b].fitness.total_cmp(&pop[a].fitness).then(a.cmp(&b)));
    idx
}

fn tournament(pop: &[Individual], size: usize, rng: &mut ChaCha8Rng) -> usize {
    let mut best = rng.random_range(0..pop.len());
    for _ in 1..size {
        let c = rng.random_range(0..pop.len());
        if pop[c].fitness > pop[best].fitness || (pop[c].fitness == pop[best].fitness && c < best) {
            best = c;
        }
    }
    best
}

/// Generational loop: elites are copied unchanged, the rest of each new
/// population comes from tournament selection, rate-gated one-point
/// crossover and per-codon uniform mutation. Deterministic in `cfg.seed`.
pub fn evolve(eval: &mut FitnessEvaluator<'_>, cfg: &EvolutionConfig) -> Result<EvolutionOutcome> {
    cfg.validate()?;
    eval.fitness_epochs = cfg.fitness_epochs;
    eval.max_params = cfg.max_params;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x6770]));
    let random_genome = |rng: &mut ChaCha8Rng| Genome {
        codons: (0..cfg.genome_length).map(|_| rng.random_range(0..cfg.codon_max)).collect(),
        wraps: cfg.wraps,
    };
    let mut pop: Vec<Individual> = (0..cfg.population_size)
        .map(|_| {
            let genome = random_genome(&mut rng);
            Individual { genome, fitness: 0.0 }
        })
        .collect();
    for ind in &mut pop {
        ind.fitness = eval.fitness(&ind.genome);
    }
    let mut log = vec![stats(0, &pop)];
    for generation in 1..=cfg.generations {
        let order = ranking(&pop);
        let mut next: Vec<Genome> = order[..cfg.elitism_count].iter().map(|&i| pop[i].genome.clone()).collect();
        while next.len() < cfg.population_size {
            let a = pop[tournament(&pop, cfg.tournament_size, &mut rng)].genome.clone();
            let b = pop[tournament(&pop, cfg.tournament_size, &mut rng)].genome.clone();
            let (mut c1, mut c2) = (a.clone(), b.clone());
            let len = a.codons.len().min(b.codons.len());
            if len > 1 && rng.random_bool(cfg.crossover_rate) {
                let cut = rng.random_range(1..len);
                c1.codons = [&a.codons[..cut], &b.codons[cut..]].concat();
                c2.codons = [&b.codons[..cut], &a.codons[cut..]].concat();
            }
            for child in [c1, c2] {
                if next.len() == cfg.population_size {
                    break;
                }
                let mut child = child;
                for codon in &mut child.codons {
                    if rng.random_bool(cfg.mutation_rate) {
                        *codon = rng.random_range(0..cfg.codon_max);
                    }
                }
                next.push(child);
            }
        }
        pop = next
            .into_iter()
            .map(|genome| {
                let fitness = eval.fitness(&genome);
                Individual { genome, fitness }
            })
            .collect();
        log.push(stats(generation, &pop));
    }
    let best = pop[ranking(&pop)[0]].clone();
    Ok(EvolutionOutcome {
        best,
        population: pop,
        log,
        trainings: eval.trainings,
        failures: eval.failures.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn genome(codons: Vec<u32>) -> Genome {
        Genome { codons, wraps: 2 }
    }

    #[test]
    fn builtin_grammar_parses() {
        let g = Grammar::builtin();
        assert_eq!(g.start, "network");
        assert_eq!(g.rules["blocks"].len(), 4);
        assert_eq!(g.rules["kernel"].len(), 5);
    }

    #[test]
    fn zero_codons_give_minimal_network() {
        let g = Grammar::builtin();
        let toks = derive_tokens(&genome(vec![0; 16]), &g).unwrap();
        assert_eq!(
            toks.join(" "),
            "conv 1 1 bn relu pool flatten dense 32 relu dropout 0.1 dense_out lr 1 epochs 10"
        );
        let d = derive_architecture(&genome(vec![0; 16]), &g, &[60, 73, 60]).unwrap();
        assert!(conforms_to_ranges(&d.spec));
        assert_eq!(d.fc_units, 32);
    }

    #[test]
    fn filters_double_per_block() {
        let g = Grammar::builtin();
        // blocks: alternative 3 (four blocks), kernels 3, strides 1, nopool.
        let mut codons = vec![3];
        for _ in 0..4 {
            codons.extend([2, 0, 1]);
        }
        codons.extend([0; 8]);
        let d = derive_architecture(&genome(codons), &g, &[8, 40, 40]).unwrap();
        let filters: Vec<usize> = d
            .spec
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv2d { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        assert_eq!(filters, vec![16, 32, 64, 128]);
    }

    #[test]
    fn overrun_and_unknown_symbols() {
        let g = Grammar::parse("<a> ::= x <a> | y").unwrap();
        let err = derive_tokens(&Genome { codons: vec![0], wraps: 3 }, &g).unwrap_err();
        assert!(matches!(err, GgpError::DerivationOverrun { wraps: 3 }));
        assert_eq!(derive_tokens(&Genome { codons: vec![0, 0, 1], wraps: 0 }, &g).unwrap(), ["x", "x", "y"]);
        assert!(Grammar::parse("<a> ::= <b>").is_err());
        assert!(Grammar::parse("<a> ::= x |").is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = EvolutionConfig {
            elitism_count: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvolutionConfig {
            mutation_rate: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
