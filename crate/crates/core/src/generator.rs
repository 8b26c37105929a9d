//! Random ODE system sampler.
//!
//! Each component function is built in eight steps: number of binary
//! operators, a uniformly random binary tree shape, operator decoration,
//! variable leaves, number of unary operators, unary insertions above
//! shallow subtrees, preorder conversion, and finally coefficients on every
//! top-level term plus an affine wrap `a*x + b` around every unary argument.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{BinaryOp, Expr, OdeSystem, UnaryOp, MAX_VARIABLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub d_max: usize,
    pub b_max: usize,
    pub u_max: usize,
    pub c_min: f64,
    pub c_max: f64,
    pub p_add: f64,
    pub p_mul: f64,
    pub unary_pool: Vec<UnaryOp>,
    pub max_unary_subtree_depth: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_max: 6,
            b_max: 5,
            u_max: 3,
            c_min: 0.05,
            c_max: 20.0,
            p_add: 0.75,
            p_mul: 0.25,
            unary_pool: vec![UnaryOp::Sin, UnaryOp::Inv, UnaryOp::Pow2],
            max_unary_subtree_depth: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("d_max must be in 1..={MAX_VARIABLES}, got {0}")]
    Dimension(usize),
    #[error("b_max and u_max must be at least 1")]
    Counts,
    #[error("need 0 < c_min < c_max, got ({0}, {1})")]
    ConstantRange(f64, f64),
    #[error("p_add + p_mul must equal 1, got {0}")]
    Probabilities(f64),
    #[error("unary pool is empty")]
    EmptyPool,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_max == 0 || self.d_max > MAX_VARIABLES {
            return Err(ConfigError::Dimension(self.d_max));
        }
        if self.b_max == 0 || self.u_max == 0 {
            return Err(ConfigError::Counts);
        }
        if !(self.c_min > 0.0 && self.c_min < self.c_max) {
            return Err(ConfigError::ConstantRange(self.c_min, self.c_max));
        }
        let total = self.p_add + self.p_mul;
        if (total - 1.0).abs() > 1e-12 || self.p_add < 0.0 || self.p_mul < 0.0 {
            return Err(ConfigError::Probabilities(total));
        }
        if self.unary_pool.is_empty() {
            return Err(ConfigError::EmptyPool);
        }
        Ok(())
    }

    /// Upper bound on the complexity of any sampled component: `b` binary
    /// nodes, `b + 1` leaves, `u` unary nodes each wrapped by 4 affine nodes,
    /// and a coefficient (2 nodes) on each of at most `b + 1` terms.
    pub fn max_component_complexity(&self) -> usize {
        let b = self.b_max;
        let u = self.u_max;
        b + (b + 1) + u + 4 * u + 2 * (b + 1)
    }
}

/// Shape of a full binary tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Shape {
    Leaf,
    Node(Box<Shape>, Box<Shape>),
}

impl Shape {
    pub fn internal_nodes(&self) -> usize {
        match self {
            Shape::Leaf => 0,
            Shape::Node(l, r) => 1 + l.internal_nodes() + r.internal_nodes(),
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            Shape::Leaf => 1,
            Shape::Node(l, r) => l.leaves() + r.leaves(),
        }
    }
}

fn catalan(n: usize) -> f64 {
    // Exact in f64 for every n used here (b_max is small).
    let mut c = 1.0f64;
    for k in 0..n {
        c = c * 2.0 * (2 * k + 1) as f64 / (k + 2) as f64;
    }
    c.round()
}

pub fn sample_dimension(cfg: &GeneratorConfig, rng: &mut impl Rng) -> usize {
    rng.random_range(1..=cfg.d_max)
}

/// Uniform sample over all full binary trees with `b` internal nodes.
///
/// The left subtree size `k` is drawn with probability
/// `Cat(k) Cat(b-1-k) / Cat(b)`, which makes every shape equally likely.
pub fn sample_binary_skeleton(b: usize, rng: &mut impl Rng) -> Shape {
    if b == 0 {
        return Shape::Leaf;
    }
    let total = catalan(b);
    let mut u = rng.random::<f64>() * total;
    let mut left = b - 1;
    for k in 0..b {
        let w = catalan(k) * catalan(b - 1 - k);
        if u < w {
            left = k;
            break;
        }
        u -= w;
    }
    let l = sample_binary_skeleton(left, rng);
    let r = sample_binary_skeleton(b - 1 - left, rng);
    Shape::Node(Box::new(l), Box::new(r))
}

/// Bookkeeping from one component draw, used by statistical tests.
#[derive(Debug, Clone, Default)]
pub struct SampleTrace {
    pub binary_ops: Vec<usize>,
    pub skeleton_ops: Vec<BinaryOp>,
    /// Depth of the subtree each unary operator was inserted above.
    pub insertion_depths: Vec<usize>,
    pub skipped_insertions: usize,
    /// Every sampled coefficient, in sampling order.
    pub constants: Vec<f64>,
}

/// Mutable tree used while building a component.
#[derive(Debug, Clone)]
enum Node {
    Var(usize),
    Unary(UnaryOp, Box<Node>),
    Binary(BinaryOp, Box<Node>, Box<Node>),
}

impl Node {
    fn depth(&self) -> usize {
        match self {
            Node::Var(_) => 1,
            Node::Unary(_, c) => 1 + c.depth(),
            Node::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    /// Preorder indices of nodes whose subtree depth is below `limit`.
    fn eligible(&self, limit: usize, idx: &mut usize, out: &mut Vec<(usize, usize)>) -> usize {
        let my = *idx;
        *idx += 1;
        let d = match self {
            Node::Var(_) => 1,
            Node::Unary(_, c) => 1 + c.eligible(limit, idx, out),
            Node::Binary(_, l, r) => {
                let dl = l.eligible(limit, idx, out);
                let dr = r.eligible(limit, idx, out);
                1 + dl.max(dr)
            }
        };
        if d < limit {
            out.push((my, d));
        }
        d
    }

    /// Inserts `op` directly above the node with preorder index `target`.
    fn insert_above(self, target: usize, op: UnaryOp, idx: &mut usize) -> Node {
        let my = *idx;
        *idx += 1;
        let node = match self {
            Node::Var(v) => Node::Var(v),
            Node::Unary(o, c) => Node::Unary(o, Box::new(c.insert_above(target, op, idx))),
            Node::Binary(o, l, r) => {
                let l = l.insert_above(target, op, idx);
                let r = r.insert_above(target, op, idx);
                Node::Binary(o, Box::new(l), Box::new(r))
            }
        };
        if my == target {
            Node::Unary(op, Box::new(node))
        } else {
            node
        }
    }
}

/// Sign is a fair coin, magnitude is log-uniform on `[c_min, c_max]`.
pub fn sample_constant(cfg: &GeneratorConfig, rng: &mut impl Rng) -> f64 {
    let (lo, hi) = (cfg.c_min.ln(), cfg.c_max.ln());
    let mag = (lo + (hi - lo) * rng.random::<f64>()).exp().clamp(cfg.c_min, cfg.c_max);
    if rng.random::<bool>() {
        mag
    } else {
        -mag
    }
}

fn decorate(
    shape: &Shape,
    cfg: &GeneratorConfig,
    dim: usize,
    rng: &mut impl Rng,
    trace: &mut SampleTrace,
) -> Node {
    match shape {
        Shape::Leaf => Node::Var(rng.random_range(0..dim)),
        Shape::Node(l, r) => {
            let op = if rng.random::<f64>() < cfg.p_add {
                BinaryOp::Add
            } else {
                BinaryOp::Mul
            };
            trace.skeleton_ops.push(op);
            let l = decorate(l, cfg, dim, rng, trace);
            let r = decorate(r, cfg, dim, rng, trace);
            Node::Binary(op, Box::new(l), Box::new(r))
        }
    }
}

/// Converts to an expression, wrapping every unary argument in `a*x + b`.
fn finish(node: &Node, cfg: &GeneratorConfig, rng: &mut impl Rng, trace: &mut SampleTrace) -> Expr {
    match node {
        Node::Var(v) => Expr::Var(*v),
        Node::Unary(op, c) => {
            let inner = finish(c, cfg, rng, trace);
            let a = sample_constant(cfg, rng);
            let b = sample_constant(cfg, rng);
            trace.constants.push(a);
            trace.constants.push(b);
            Expr::unary(
                *op,
                Expr::add(Expr::mul(Expr::Const(a), inner), Expr::Const(b)),
            )
        }
        Node::Binary(op, l, r) => {
            let l = finish(l, cfg, rng, trace);
            let r = finish(r, cfg, rng, trace);
            Expr::binary(*op, l, r)
        }
    }
}

/// Prepends a coefficient to each top-level additive term.
fn with_term_coefficients(
    e: Expr,
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
    trace: &mut SampleTrace,
) -> Expr {
    match e {
        Expr::Binary(BinaryOp::Add, l, r) => {
            let l = with_term_coefficients(*l, cfg, rng, trace);
            let r = with_term_coefficients(*r, cfg, rng, trace);
            Expr::add(l, r)
        }
        term => {
            let c = sample_constant(cfg, rng);
            trace.constants.push(c);
            Expr::mul(Expr::Const(c), term)
        }
    }
}

/// Samples one component and records the intermediate draws, which the
/// statistical tests inspect.
pub fn sample_component_traced(
    cfg: &GeneratorConfig,
    dim: usize,
    rng: &mut impl Rng,
) -> (Expr, SampleTrace) {
    assert!(dim >= 1 && dim <= MAX_VARIABLES, "dimension out of range");
    let mut trace = SampleTrace::default();
    let b = rng.random_range(1..=cfg.b_max);
    trace.binary_ops.push(b);
    let shape = sample_binary_skeleton(b, rng);
    let mut tree = decorate(&shape, cfg, dim, rng, &mut trace);

    let u = rng.random_range(1..=cfg.u_max);
    for _ in 0..u {
        let mut sites = Vec::new();
        tree.eligible(cfg.max_unary_subtree_depth, &mut 0, &mut sites);
        if sites.is_empty() {
            trace.skipped_insertions += 1;
            continue;
        }
        let (target, depth) = sites[rng.random_range(0..sites.len())];
        let op = cfg.unary_pool[rng.random_range(0..cfg.unary_pool.len())];
        trace.insertion_depths.push(depth);
        tree = tree.insert_above(target, op, &mut 0);
    }
    debug_assert!(tree.depth() >= 1);

    let expr = finish(&tree, cfg, rng, &mut trace);
    let expr = with_term_coefficients(expr, cfg, rng, &mut trace);
    (expr, trace)
}

pub fn sample_component(cfg: &GeneratorConfig, dim: usize, rng: &mut impl Rng) -> Expr {
    sample_component_traced(cfg, dim, rng).0
}

pub fn sample_system(cfg: &GeneratorConfig, rng: &mut impl Rng) -> OdeSystem {
    let dim = sample_dimension(cfg, rng);
    sample_system_with_dim(cfg, dim, rng)
}

pub fn sample_system_with_dim(cfg: &GeneratorConfig, dim: usize, rng: &mut impl Rng) -> OdeSystem {
    let comps = (0..dim).map(|_| sample_component(cfg, dim, rng)).collect();
    OdeSystem::new(comps).expect("sampled variables are always in range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn catalan_numbers() {
        let v: Vec<f64> = (0..7).map(catalan).collect();
        assert_eq!(v, vec![1.0, 1.0, 2.0, 5.0, 14.0, 42.0, 132.0]);
    }

    #[test]
    fn small_skeletons() {
        let mut rng = seeded(1);
        assert_eq!(sample_binary_skeleton(0, &mut rng), Shape::Leaf);
        assert_eq!(
            sample_binary_skeleton(1, &mut rng),
            Shape::Node(Box::new(Shape::Leaf), Box::new(Shape::Leaf))
        );
        for b in 0..8 {
            let s = sample_binary_skeleton(b, &mut rng);
            assert_eq!(s.internal_nodes(), b);
            assert_eq!(s.leaves(), b + 1);
        }
    }

    #[test]
    fn dimension_one_only() {
        let cfg = GeneratorConfig {
            d_max: 1,
            ..Default::default()
        };
        let mut rng = seeded(3);
        for _ in 0..100 {
            assert_eq!(sample_dimension(&cfg, &mut rng), 1);
            assert_eq!(sample_system(&cfg, &mut rng).dim(), 1);
        }
    }

    #[test]
    fn forced_single_pow2() {
        let cfg = GeneratorConfig {
            u_max: 1,
            unary_pool: vec![UnaryOp::Pow2],
            ..Default::default()
        };
        let mut rng = seeded(5);
        for _ in 0..200 {
            let e = sample_component(&cfg, 3, &mut rng);
            let mut n = 0;
            e.visit(&mut |n2| {
                if let Expr::Unary(op, _) = n2 {
                    assert_eq!(*op, UnaryOp::Pow2);
                    n += 1;
                }
            });
            assert_eq!(n, 1);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = GeneratorConfig::default();
        let a: Vec<OdeSystem> = {
            let mut rng = seeded(11);
            (0..20).map(|_| sample_system(&cfg, &mut rng)).collect()
        };
        let b: Vec<OdeSystem> = {
            let mut rng = seeded(11);
            (0..20).map(|_| sample_system(&cfg, &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn constants_in_range_and_variables_bounded() {
        let cfg = GeneratorConfig::default();
        let mut rng = seeded(9);
        for _ in 0..2000 {
            let dim = rng.random_range(1..=6);
            let (e, trace) = sample_component_traced(&cfg, dim, &mut rng);
            assert!(e.max_variable().unwrap() < dim);
            for c in e.constants() {
                assert!((0.05..=20.0).contains(&c.abs()), "{c}");
            }
            assert_eq!(trace.constants.len(), e.constant_count());
            assert!(trace.insertion_depths.iter().all(|&d| d < 6));
            assert!(e.complexity() <= cfg.max_component_complexity());
        }
    }

    #[test]
    fn complexity_bound_is_attained_analytically() {
        // b=5 all-add skeleton with 3 unary ops inside terms gives the bound.
        assert_eq!(GeneratorConfig::default().max_component_complexity(), 38);
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig::default().validate().is_ok());
        let bad = GeneratorConfig {
            p_add: 0.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = GeneratorConfig {
            c_min: 30.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
