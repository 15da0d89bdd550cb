//! Finite-population simulation under the decentralized strategies, Monte
//! Carlo estimation of exponentiated costs, and the ε-Nash experiment.
//!
//! Paths are processed in fixed chunks of [`CHUNK`] so that the coupling term
//! `x^{(N)} = (1/N) g^N x` is one dense product per step. Chunk boundaries
//! depend only on the path count, and noise comes from streams keyed by
//! `(seed, path, agent)`, so results never depend on the executor.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use crate::control::{self, FeedbackLaw};
use crate::exec::Executor;
use crate::gmfg::{self, MeanFieldSolution, NodeSolution, Prepared};
use crate::graphon::{Graphon, StepWeights};
use crate::linalg;
use crate::model::{AlphaGrid, NodeLaw, ProblemSpec};
use crate::ode::MatrixPath;
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Paths simulated together in one work unit.
pub const CHUNK: usize = 32;
/// Largest exponent `γΛ_T` accepted before the cost is reported as overflowing.
pub const MAX_EXPONENT: f64 = 700.0;
/// Reference points per cell used for `ε₂` and `ε₃`.
pub const REFERENCE_REFINEMENT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub enum DeviationStrategy {
    /// Feedback of the auxiliary problem with parameter `δ′`.
    Acp(f64),
    Custom(FeedbackLaw),
}

/// One agent switching away from the decentralized strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Deviation {
    /// 0-based agent index.
    pub agent: usize,
    pub strategy: DeviationStrategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub paths: usize,
    pub seed: u64,
    /// Euler-Maruyama step; `None` uses the solver step.
    pub dt: Option<f64>,
    pub deviation: Option<Deviation>,
    /// 0-based agents whose costs are accumulated; `None` uses
    /// [`default_probes`].
    pub probes: Option<Vec<usize>>,
    /// Keep full trajectories. Memory grows as `paths × agents × steps`.
    pub record: bool,
    /// Also simulate the limit dynamics of each probe agent with the same
    /// initial state and Brownian path.
    pub limit_shadow: bool,
}

impl SimConfig {
    pub fn new(paths: usize, seed: u64) -> Self {
        SimConfig { paths, seed, dt: None, deviation: None, probes: None, record: false, limit_shadow: false }
    }
}

/// First, middle (`⌈N/2⌉`) and last agent, 0-based and deduplicated.
pub fn default_probes(n: usize) -> Vec<usize> {
    let mut v = vec![0, n.div_ceil(2) - 1, n - 1];
    v.dedup();
    v
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Coefficients at every simulation node, flattened row-major.
#[derive(Debug, Clone)]
struct StepTable {
    steps: usize,
    dt: f64,
    sqrt_dt: f64,
    n: usize,
    m: usize,
    w: usize,
    /// Solver node at or left of each simulation node.
    node: Vec<usize>,
    /// Linear-interpolation weight towards `node + 1` for limit paths.
    frac: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    d: Vec<f64>,
    sigma: Vec<f64>,
    q: Vec<f64>,
    r: Vec<f64>,
    qf: Vec<f64>,
    tracking: Vec<f64>,
    terminal_tracking: Vec<f64>,
    gamma: f64,
}

impl StepTable {
    fn new(spec: &ProblemSpec, dt: Option<f64>) -> Result<Self> {
        let c = &spec.coefficients;
        let grid = spec.grids.time;
        let horizon = c.horizon;
        let h = grid.step();
        let dt = dt.unwrap_or(h);
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidModel(format!("simulation step must be positive, got {dt}")));
        }
        let steps = libm::round(horizon / dt) as usize;
        if steps == 0 || libm::fabs(steps as f64 * dt - horizon) > 1e-9 * horizon {
            return Err(Error::InvalidModel(format!("dt = {dt} does not divide T = {horizon}")));
        }
        let dt = horizon / steps as f64;
        let last = grid.steps;
        let (n, m, w) = (c.state_dim(), c.control_dim(), c.noise_dim());
        let mut t = StepTable {
            steps,
            dt,
            sqrt_dt: libm::sqrt(dt),
            n,
            m,
            w,
            node: Vec::with_capacity(steps + 1),
            frac: Vec::with_capacity(steps + 1),
            a: Vec::new(),
            b: Vec::new(),
            d: Vec::new(),
            sigma: Vec::new(),
            q: Vec::new(),
            r: Vec::new(),
            qf: row_major(&c.terminal_weight),
            tracking: row_major(&c.tracking),
            terminal_tracking: row_major(&c.terminal_tracking),
            gamma: c.risk_sensitivity,
        };
        for s in 0..=steps {
            let ts = s as f64 * dt;
            let k = grid.left_node(ts);
            t.node.push(k);
            t.frac.push(if k == last { 0.0 } else { (ts / h - k as f64).clamp(0.0, 1.0) });
            let fr = spec.frame(ts)?;
            t.a.extend(row_major(&fr.a));
            t.b.extend(row_major(&fr.b));
            t.d.extend(row_major(&fr.d));
            t.sigma.extend(row_major(&fr.sigma));
            t.q.extend(row_major(&fr.q));
            t.r.extend(row_major(&fr.r));
        }
        Ok(t)
    }

    /// Trapezoid weight of node `s`.
    fn weight(&self, s: usize) -> f64 {
        if s == 0 || s == self.steps {
            0.5 * self.dt
        } else {
            self.dt
        }
    }

    /// Limit mean `z(t_s)` by linear interpolation between solver nodes.
    fn z_at(&self, z: &MatrixPath, s: usize, out: &mut [f64]) {
        let k = self.node[s];
        let f = self.frac[s];
        let lo = z.at_node(k);
        if f == 0.0 {
            out.copy_from_slice(lo.as_slice());
        } else {
            let hi = z.at_node(k + 1);
            for (c, o) in out.iter_mut().enumerate() {
                *o = (1.0 - f) * lo[c] + f * hi[c];
            }
        }
    }

    /// `u = −K x − k`.
    #[inline(always)]
    fn control(&self, gain: &[f64], offset: &[f64], x: &[f64], u: &mut [f64]) {
        let n = self.n;
        if n == 1 && u.len() == 1 {
            u[0] = -(offset[0] + gain[0] * x[0]);
            return;
        }
        for (r, ur) in u.iter_mut().enumerate() {
            let mut acc = offset[r];
            for c in 0..n {
                acc += gain[r * n + c] * x[c];
            }
            *ur = -acc;
        }
    }

    #[inline]
    fn weighted_deviation(weight: &[f64], tracking: &[f64], x: &[f64], target: &[f64], scratch: &mut [f64]) -> f64 {
        let n = x.len();
        for r in 0..n {
            let mut acc = x[r];
            for c in 0..n {
                acc -= tracking[r * n + c] * target[c];
            }
            scratch[r] = acc;
        }
        quad(weight, scratch)
    }

    #[inline]
    fn terminal(&self, x: &[f64], target: &[f64], scratch: &mut [f64]) -> f64 {
        Self::weighted_deviation(&self.qf, &self.terminal_tracking, x, target, scratch)
    }

    /// Coefficients at simulation node `s`.
    #[inline]
    fn at(&self, s: usize) -> Step<'_> {
        let (n, m, w) = (self.n, self.m, self.w);
        Step {
            a: &self.a[s * n * n..(s + 1) * n * n],
            b: &self.b[s * n * m..(s + 1) * n * m],
            d: &self.d[s * n * n..(s + 1) * n * n],
            sigma: &self.sigma[s * n * w..(s + 1) * n * w],
            q: &self.q[s * n * n..(s + 1) * n * n],
            r: &self.r[s * m * m..(s + 1) * m * m],
            tracking: &self.tracking,
            dt: self.dt,
            sqrt_dt: self.sqrt_dt,
            weight: self.weight(s),
            scalar: n == 1 && m == 1 && w == 1,
        }
    }
}

/// Borrowed coefficients of one simulation node.
struct Step<'a> {
    a: &'a [f64],
    b: &'a [f64],
    d: &'a [f64],
    sigma: &'a [f64],
    q: &'a [f64],
    r: &'a [f64],
    tracking: &'a [f64],
    dt: f64,
    sqrt_dt: f64,
    /// Trapezoid weight.
    weight: f64,
    scalar: bool,
}

impl Step<'_> {
    /// `‖x − Γ target‖²_Q + ‖u‖²_R`.
    #[inline(always)]
    fn integrand(&self, x: &[f64], target: &[f64], u: &[f64], scratch: &mut [f64]) -> f64 {
        if self.scalar {
            let e = x[0] - self.tracking[0] * target[0];
            return self.q[0] * e * e + self.r[0] * u[0] * u[0];
        }
        StepTable::weighted_deviation(self.q, self.tracking, x, target, scratch) + quad(self.r, u)
    }

    /// One Euler-Maruyama step with external input `D ext`.
    #[inline(always)]
    fn advance(&self, x: &mut [f64], u: &[f64], ext: &[f64], xi: &[f64], scratch: &mut [f64]) {
        if self.scalar {
            let drift = self.a[0] * x[0] + self.d[0] * ext[0] + self.b[0] * u[0];
            x[0] += drift * self.dt + self.sigma[0] * xi[0] * self.sqrt_dt;
            return;
        }
        let (n, m, w) = (x.len(), u.len(), xi.len());
        for r in 0..n {
            let mut drift = 0.0;
            for c in 0..n {
                drift += self.a[r * n + c] * x[c] + self.d[r * n + c] * ext[c];
            }
            for c in 0..m {
                drift += self.b[r * m + c] * u[c];
            }
            let mut noise = 0.0;
            for c in 0..w {
                noise += self.sigma[r * w + c] * xi[c];
            }
            scratch[r] = x[r] + drift * self.dt + noise * self.sqrt_dt;
        }
        x.copy_from_slice(&scratch[..n]);
    }
}

#[inline]
fn quad(m: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for r in 0..n {
        let mut row = 0.0;
        for c in 0..n {
            row += m[r * n + c] * x[c];
        }
        acc += x[r] * row;
    }
    acc
}

/// A strategy flattened per solver node.
#[derive(Debug, Clone)]
struct FlatLaw {
    gain: Vec<f64>,
    offset: Vec<f64>,
    n: usize,
    m: usize,
}

impl FlatLaw {
    fn new(law: &FeedbackLaw) -> Self {
        let (m, n) = law.gain[0].shape();
        let gain = law.gain.iter().flat_map(row_major).collect();
        let offset = law.offset.iter().flat_map(|o| o.iter().copied().collect::<Vec<_>>()).collect();
        FlatLaw { gain, offset, n, m }
    }

    fn gain(&self, k: usize) -> &[f64] {
        &self.gain[k * self.m * self.n..(k + 1) * self.m * self.n]
    }

    fn offset(&self, k: usize) -> &[f64] {
        &self.offset[k * self.m..(k + 1) * self.m]
    }
}

/// Sampler for one initial law.
#[derive(Debug, Clone)]
struct InitialSampler {
    law: NodeLaw,
    root: Option<Vec<f64>>,
}

impl InitialSampler {
    fn new(law: NodeLaw) -> Result<Self> {
        let root = match &law {
            NodeLaw::Gaussian { covariance, .. } => Some(row_major(&linalg::psd_sqrt(covariance)?)),
            _ => None,
        };
        Ok(InitialSampler { law, root })
    }

    fn sample(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match &self.law {
            NodeLaw::Point(m) => out.copy_from_slice(m.as_slice()),
            NodeLaw::Uniform { mean, radius } => {
                for (o, mu) in out.iter_mut().zip(mean.iter()) {
                    *o = mu + radius * (2.0 * rng::uniform(rng) - 1.0);
                }
            }
            NodeLaw::Gaussian { mean, .. } => {
                let n = out.len();
                let root = self.root.as_ref().expect("gaussian sampler has a square root");
                let z: Vec<f64> = (0..n).map(|_| rng::normal(rng)).collect();
                for r in 0..n {
                    let mut acc = mean[r];
                    for c in 0..n {
                        acc += root[r * n + c] * z[c];
                    }
                    out[r] = acc;
                }
            }
        }
    }
}

/// Per-agent data of a finite population.
#[derive(Debug, Clone)]
pub struct Agent {
    /// Midpoint `I_i*` of the agent's cell.
    pub alpha: f64,
    pub law: NodeLaw,
    /// Limit objects at `alpha`, from the Nyström extension.
    pub node: NodeSolution,
    pub feedback: FeedbackLaw,
}

/// A sampled population ready for simulation.
#[derive(Debug, Clone)]
pub struct Population {
    pub weights: StepWeights,
    pub agents: Vec<Agent>,
    kernel: DMatrix<f64>,
    table: StepTable,
    laws: Vec<FlatLaw>,
    samplers: Vec<InitialSampler>,
    prepared: Prepared,
}

impl Population {
    /// Agent `i` sits at the midpoint of the `i`-th cell and uses the
    /// best response to its limit mean `z_{I_i*}`.
    pub fn new<E: Executor>(
        p: &Prepared,
        sol: &MeanFieldSolution,
        weights: &StepWeights,
        dt: Option<f64>,
        exec: &E,
    ) -> Result<Self> {
        let n_agents = weights.size();
        let grid = AlphaGrid::new(n_agents)?;
        let nodes: Vec<Result<NodeSolution>> = exec.map(n_agents, |i| gmfg::extend(p, sol, grid.node(i)));
        let mut agents = Vec::with_capacity(n_agents);
        for (i, node) in nodes.into_iter().enumerate() {
            let node = node?;
            let feedback = FeedbackLaw::best_response(p, &node.s);
            let alpha = grid.node(i);
            agents.push(Agent { alpha, law: p.spec.initial.at(alpha), node, feedback });
        }
        Self::from_agents(p, weights, agents, dt)
    }

    fn from_agents(p: &Prepared, weights: &StepWeights, agents: Vec<Agent>, dt: Option<f64>) -> Result<Self> {
        let table = StepTable::new(&p.spec, dt)?;
        let laws: Vec<FlatLaw> = agents.iter().map(|a| FlatLaw::new(&a.feedback)).collect();
        let samplers = agents.iter().map(|a| InitialSampler::new(a.law.clone())).collect::<Result<Vec<_>>>()?;
        Ok(Population {
            weights: weights.clone(),
            agents,
            kernel: weights.kernel(),
            table,
            laws,
            samplers,
            prepared: p.clone(),
        })
    }

    pub fn size(&self) -> usize {
        self.agents.len()
    }

    pub fn steps(&self) -> usize {
        self.table.steps
    }

    pub fn dt(&self) -> f64 {
        self.table.dt
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prepared
    }

    /// Closed-form limit cost `J_i(ū)` of agent `i`.
    pub fn limit_cost(&self, agent: usize) -> Result<f64> {
        let a = &self.agents[agent];
        control::closed_form_cost(
            self.table.gamma,
            self.prepared.riccati.pi.at_node(0),
            a.node.s.at_node(0),
            a.node.r[0],
            &a.law,
        )
    }

    fn resolve_deviation(&self, dev: &Deviation) -> Result<FlatLaw> {
        if dev.agent >= self.size() {
            return Err(Error::OutOfRange(format!("deviating agent {} of {}", dev.agent, self.size())));
        }
        let law = match &dev.strategy {
            DeviationStrategy::Acp(delta) => {
                control::acp_solve(&self.prepared, *delta, &self.agents[dev.agent].node.z, None)?.feedback
            }
            DeviationStrategy::Custom(law) => law.clone(),
        };
        let nodes = self.prepared.grids().time.nodes();
        if law.gain.len() != nodes || law.gain[0].shape() != (self.table.m, self.table.n) {
            return Err(Error::Dimension("deviation law does not match the solver grid or system size".into()));
        }
        Ok(FlatLaw::new(&law))
    }
}

/// Stored trajectories, indexed `[path][agent][time][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationPaths {
    pub paths: usize,
    pub agents: usize,
    pub times: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub dt: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub xn: Vec<f64>,
}

impl PopulationPaths {
    fn index(&self, path: usize, agent: usize, time: usize) -> usize {
        (path * self.agents + agent) * self.times + time
    }

    pub fn x(&self, path: usize, agent: usize, time: usize) -> &[f64] {
        let i = self.index(path, agent, time) * self.state_dim;
        &self.x[i..i + self.state_dim]
    }

    pub fn u(&self, path: usize, agent: usize, time: usize) -> &[f64] {
        let i = self.index(path, agent, time) * self.control_dim;
        &self.u[i..i + self.control_dim]
    }

    pub fn xn(&self, path: usize, agent: usize, time: usize) -> &[f64] {
        let i = self.index(path, agent, time) * self.state_dim;
        &self.xn[i..i + self.state_dim]
    }
}

/// Output of [`simulate_population`].
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationRun {
    pub probes: Vec<usize>,
    /// `Λ_T` per probe agent and path.
    pub exponents: Vec<Vec<f64>>,
    /// `Λ_T` of the limit dynamics for each probe, when requested.
    pub limit_exponents: Option<Vec<Vec<f64>>>,
    pub paths: Option<PopulationPaths>,
}

struct ChunkOut {
    exponents: Vec<Vec<f64>>,
    limit: Vec<Vec<f64>>,
    x: Vec<f64>,
    u: Vec<f64>,
    xn: Vec<f64>,
}

struct Plan<'a> {
    pop: &'a Population,
    seed: u64,
    probes: Vec<usize>,
    slot: Vec<Option<usize>>,
    deviation: Option<(usize, FlatLaw)>,
    record: bool,
    shadow: bool,
}

impl Plan<'_> {
    fn law(&self, agent: usize) -> &FlatLaw {
        match &self.deviation {
            Some((a, law)) if *a == agent => law,
            _ => &self.pop.laws[agent],
        }
    }

    fn run_chunk(&self, first: usize, count: usize) -> Result<ChunkOut> {
        let pop = self.pop;
        let t = &pop.table;
        let (n, m, w) = (t.n, t.m, t.w);
        let na = pop.size();
        let np = self.probes.len();
        let times = t.steps + 1;

        let mut x = vec![0.0; na * count * n];
        let mut xn = vec![0.0; na * count * n];
        let mut noise: Vec<ChaCha8Rng> = Vec::with_capacity(na * count);
        for a in 0..na {
            for p in 0..count {
                let path = first + p;
                let mut init = rng::stream(self.seed, path, a, Purpose::Initial);
                pop.samplers[a].sample(&mut init, &mut x[(a * count + p) * n..(a * count + p + 1) * n]);
                noise.push(rng::stream(self.seed, path, a, Purpose::Noise));
            }
        }
        let mut shadow = vec![0.0; np * count * n];
        if self.shadow {
            for (j, &a) in self.probes.iter().enumerate() {
                shadow[j * count * n..(j + 1) * count * n].copy_from_slice(&x[a * count * n..(a + 1) * count * n]);
            }
        }
        let mut lambda = vec![vec![0.0; count]; np];
        let mut limit = vec![vec![0.0; count]; if self.shadow { np } else { 0 }];
        let (mut rx, mut ru, mut rxn) = if self.record {
            (vec![0.0; count * na * times * n], vec![0.0; count * na * times * m], vec![0.0; count * na * times * n])
        } else {
            (Vec::new(), Vec::new(), Vec::new())
        };
        let mut kept_noise = vec![0.0; np * count * w];
        let mut u = vec![0.0; m];
        let mut xi = vec![0.0; w];
        let mut scratch = vec![0.0; n];
        let mut z = vec![0.0; n];

        for s in 0..=t.steps {
            linalg::kernel_apply(1.0, &pop.kernel, &x, count * n, &mut xn);
            let k = t.node[s];
            let st = t.at(s);
            let last = s == t.steps;
            for a in 0..na {
                let law = self.law(a);
                let gain = law.gain(k);
                let offset = &law.offset[k * m..(k + 1) * m];
                let slot = self.slot[a];
                for p in 0..count {
                    let i = (a * count + p) * n;
                    let xa = &mut x[i..i + n];
                    let ext = &xn[i..i + n];
                    t.control(gain, offset, xa, &mut u);
                    if self.record {
                        let ri = (p * na + a) * times + s;
                        rx[ri * n..(ri + 1) * n].copy_from_slice(xa);
                        ru[ri * m..(ri + 1) * m].copy_from_slice(&u);
                        rxn[ri * n..(ri + 1) * n].copy_from_slice(ext);
                    }
                    if let Some(j) = slot {
                        let mut l = st.weight * st.integrand(xa, ext, &u, &mut scratch);
                        if last {
                            l += t.terminal(xa, ext, &mut scratch);
                        }
                        lambda[j][p] += l;
                    }
                    if last {
                        continue;
                    }
                    for v in xi.iter_mut() {
                        *v = rng::normal(&mut noise[a * count + p]);
                    }
                    if let Some(j) = slot {
                        kept_noise[(j * count + p) * w..(j * count + p + 1) * w].copy_from_slice(&xi);
                    }
                    st.advance(xa, &u, ext, &xi, &mut scratch);
                    if xa.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Simulation { path: first + p, agent: a, step: s + 1 });
                    }
                }
            }
            if self.shadow {
                for (j, &a) in self.probes.iter().enumerate() {
                    let base = &pop.laws[a];
                    t.z_at(&pop.agents[a].node.z, s, &mut z);
                    for p in 0..count {
                        let i = (j * count + p) * n;
                        let xs = &mut shadow[i..i + n];
                        t.control(base.gain(k), base.offset(k), xs, &mut u);
                        let mut l = st.weight * st.integrand(xs, &z, &u, &mut scratch);
                        if last {
                            l += t.terminal(xs, &z, &mut scratch);
                            limit[j][p] += l;
                            continue;
                        }
                        limit[j][p] += l;
                        st.advance(xs, &u, &z, &kept_noise[(j * count + p) * w..(j * count + p + 1) * w], &mut scratch);
                        if xs.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Simulation { path: first + p, agent: a, step: s + 1 });
                        }
                    }
                }
            }
        }
        Ok(ChunkOut { exponents: lambda, limit, x: rx, u: ru, xn: rxn })
    }
}

/// Euler-Maruyama simulation of the population under the decentralized
/// strategies, with an optional deviating agent.
pub fn simulate_population<E: Executor>(pop: &Population, cfg: &SimConfig, exec: &E) -> Result<PopulationRun> {
    let na = pop.size();
    if cfg.paths == 0 {
        return Err(Error::InvalidModel("at least one Monte Carlo path is required".into()));
    }
    if let Some(dt) = cfg.dt {
        if libm::fabs(dt - pop.dt()) > 1e-12 * pop.dt().max(1.0) {
            return Err(Error::InvalidModel(format!(
                "config dt = {dt} differs from the population step {}",
                pop.dt()
            )));
        }
    }
    let probes = cfg.probes.clone().unwrap_or_else(|| default_probes(na));
    let mut slot = vec![None; na];
    for (j, &a) in probes.iter().enumerate() {
        if a >= na {
            return Err(Error::OutOfRange(format!("probe agent {a} of {na}")));
        }
        if slot[a].is_some() {
            return Err(Error::InvalidModel(format!("probe agent {a} listed twice")));
        }
        slot[a] = Some(j);
    }
    let deviation = match &cfg.deviation {
        Some(d) => Some((d.agent, pop.resolve_deviation(d)?)),
        None => None,
    };
    let plan = Plan {
        pop,
        seed: cfg.seed,
        probes: probes.clone(),
        slot,
        deviation,
        record: cfg.record,
        shadow: cfg.limit_shadow,
    };
    let chunks = cfg.paths.div_ceil(CHUNK);
    let outs = exec.map(chunks, |c| {
        let first = c * CHUNK;
        plan.run_chunk(first, CHUNK.min(cfg.paths - first))
    });
    let np = probes.len();
    let mut exponents = vec![Vec::with_capacity(cfg.paths); np];
    let mut limit = vec![Vec::with_capacity(cfg.paths); np];
    let (mut x, mut u, mut xn) = (Vec::new(), Vec::new(), Vec::new());
    for out in outs {
        let out = out?;
        for j in 0..np {
            exponents[j].extend_from_slice(&out.exponents[j]);
            if cfg.limit_shadow {
                limit[j].extend_from_slice(&out.limit[j]);
            }
        }
        x.extend(out.x);
        u.extend(out.u);
        xn.extend(out.xn);
    }
    let paths = cfg.record.then(|| PopulationPaths {
        paths: cfg.paths,
        agents: na,
        times: pop.steps() + 1,
        state_dim: pop.table.n,
        control_dim: pop.table.m,
        dt: pop.dt(),
        x,
        u,
        xn,
    });
    Ok(PopulationRun { probes, exponents, limit_exponents: cfg.limit_shadow.then_some(limit), paths })
}

/// `Λ_T` of one agent on every stored path, using the running and terminal
/// weights of `pop`.
pub fn path_exponents(pop: &Population, paths: &PopulationPaths, agent: usize) -> Result<Vec<f64>> {
    let t = &pop.table;
    if paths.times != t.steps + 1 || paths.state_dim != t.n || paths.control_dim != t.m || agent >= paths.agents {
        return Err(Error::Dimension("paths do not match the population".into()));
    }
    let mut scratch = vec![0.0; t.n];
    Ok((0..paths.paths)
        .map(|p| {
            let mut l = 0.0;
            for s in 0..=t.steps {
                let (x, xn) = (paths.x(p, agent, s), paths.xn(p, agent, s));
                let mut v = t.at(s).weight * t.at(s).integrand(x, xn, paths.u(p, agent, s), &mut scratch);
                if s == t.steps {
                    v += t.terminal(x, xn, &mut scratch);
                }
                l += v;
            }
            l
        })
        .collect())
}

/// `E exp(γΛ_T)` for one agent from stored paths.
pub fn estimate_cost(pop: &Population, paths: &PopulationPaths, agent: usize) -> Result<CostEstimate> {
    CostEstimate::from_exponents(pop.table.gamma, &path_exponents(pop, paths, agent)?)
}

/// Monte Carlo estimate of `E exp(γΛ_T)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    /// `log` of `mean`, finite even when `mean` is large.
    pub log_mean: f64,
    /// Largest `γΛ_T` seen.
    pub log_domain_max: f64,
    pub median_exponent: f64,
    pub paths: usize,
    /// Kish effective sample size of the weights `exp(γΛ_T)`.
    pub effective_paths: f64,
    /// The top 1% of paths carry more than half of the mean.
    pub heavy_tail: bool,
}

impl CostEstimate {
    pub fn from_exponents(gamma: f64, lambda: &[f64]) -> Result<Self> {
        let m = lambda.len();
        if m == 0 {
            return Err(Error::InvalidModel("no paths to estimate from".into()));
        }
        let e: Vec<f64> = lambda.iter().map(|l| gamma * l).collect();
        if let Some(bad) = e.iter().find(|v| !v.is_finite()) {
            return Err(Error::DivergentCost(format!("non-finite exponent {bad}")));
        }
        let shift = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if shift > MAX_EXPONENT {
            return Err(Error::CostOverflow { max_exponent: shift });
        }
        let mut w: Vec<f64> = e.iter().map(|v| libm::exp(v - shift)).collect();
        let total: f64 = w.iter().sum();
        let mean_w = total / m as f64;
        let var_w = if m > 1 {
            w.iter().map(|v| (v - mean_w) * (v - mean_w)).sum::<f64>() / (m - 1) as f64
        } else {
            0.0
        };
        let scale = libm::exp(shift);
        let effective_paths = total * total / w.iter().map(|v| v * v).sum::<f64>();
        w.sort_by(|a, b| b.total_cmp(a));
        let top = m.div_ceil(100);
        let heavy_tail = m >= 100 && w[..top].iter().sum::<f64>() > 0.5 * total;
        let mut sorted = e.clone();
        sorted.sort_by(f64::total_cmp);
        let median_exponent =
            if m % 2 == 1 { sorted[m / 2] } else { 0.5 * (sorted[m / 2 - 1] + sorted[m / 2]) };
        Ok(CostEstimate {
            mean: mean_w * scale,
            std_error: libm::sqrt(var_w / m as f64) * scale,
            log_mean: shift + libm::log(mean_w),
            log_domain_max: shift,
            median_exponent,
            paths: m,
            effective_paths,
            heavy_tail,
        })
    }
}

/// Mean and standard error of `exp(γΛ_a) − exp(γΛ_b)` over paired paths.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct PairedEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl PairedEstimate {
    pub fn from_exponents(gamma: f64, a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::Dimension("paired samples must have equal, non-zero length".into()));
        }
        let shift = a.iter().chain(b).map(|l| gamma * l).fold(f64::NEG_INFINITY, f64::max);
        if shift > MAX_EXPONENT || !shift.is_finite() {
            return Err(Error::CostOverflow { max_exponent: shift });
        }
        let d: Vec<f64> =
            a.iter().zip(b).map(|(x, y)| libm::exp(gamma * x - shift) - libm::exp(gamma * y - shift)).collect();
        let m = d.len() as f64;
        let mean = d.iter().sum::<f64>() / m;
        let var = if d.len() > 1 { d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0) } else { 0.0 };
        let scale = libm::exp(shift);
        Ok(PairedEstimate { mean: mean * scale, std_error: libm::sqrt(var / m) * scale })
    }
}

/// `Λ_T` of the one-agent limit dynamics with frozen `z`, under `law`.
///
/// Uses the noise and initial streams of agent 0, so it pairs with agent 0
/// of a population run with the same seed.
#[allow(clippy::too_many_arguments)]
pub fn limit_exponents<E: Executor>(
    p: &Prepared,
    z: &MatrixPath,
    law: &FeedbackLaw,
    initial: &NodeLaw,
    paths: usize,
    seed: u64,
    dt: Option<f64>,
    exec: &E,
) -> Result<Vec<f64>> {
    if paths == 0 {
        return Err(Error::InvalidModel("at least one Monte Carlo path is required".into()));
    }
    let t = StepTable::new(&p.spec, dt)?;
    let flat = FlatLaw::new(law);
    let sampler = InitialSampler::new(initial.clone())?;
    let (n, m, w) = (t.n, t.m, t.w);
    let zs: Vec<Vec<f64>> = (0..=t.steps)
        .map(|s| {
            let mut v = vec![0.0; n];
            t.z_at(z, s, &mut v);
            v
        })
        .collect();
    let chunks = paths.div_ceil(CHUNK);
    let outs = exec.map(chunks, |c| -> Result<Vec<f64>> {
        let first = c * CHUNK;
        let count = CHUNK.min(paths - first);
        let mut out = Vec::with_capacity(count);
        let (mut x, mut u, mut xi, mut scratch) = (vec![0.0; n], vec![0.0; m], vec![0.0; w], vec![0.0; n]);
        for path in first..first + count {
            let mut init = rng::stream(seed, path, 0, Purpose::Initial);
            sampler.sample(&mut init, &mut x);
            let mut noise = rng::stream(seed, path, 0, Purpose::Noise);
            let mut l = 0.0;
            for s in 0..=t.steps {
                let k = t.node[s];
                t.control(flat.gain(k), flat.offset(k), &x, &mut u);
                let st = t.at(s);
                l += st.weight * st.integrand(&x, &zs[s], &u, &mut scratch);
                if s == t.steps {
                    l += t.terminal(&x, &zs[s], &mut scratch);
                    break;
                }
                for v in xi.iter_mut() {
                    *v = rng::normal(&mut noise);
                }
                st.advance(&mut x, &u, &zs[s], &xi, &mut scratch);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Simulation { path, agent: 0, step: s + 1 });
                }
            }
            out.push(l);
        }
        Ok(out)
    });
    let mut all = Vec::with_capacity(paths);
    for o in outs {
        all.extend(o?);
    }
    Ok(all)
}

/// Approximation errors of the `N`-agent model against the limit.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct ApproximationErrors {
    /// Coupling error of the step graphon.
    pub eps1: f64,
    /// `sup_{α,t} |z_{I*(α)}(t) − z_α(t)|` over the reference points.
    pub eps2: f64,
    /// `sup_α |m(I*(α)) − m(α)|` over the reference points.
    pub eps3: f64,
}

/// `ε₁, ε₂, ε₃` for `N = weights.size()` agents. The continuum side is
/// evaluated at `α = k/(4N)`, `k = 0..=4N`, by Nyström extension.
pub fn approximation_errors<E: Executor>(
    p: &Prepared,
    sol: &MeanFieldSolution,
    weights: &StepWeights,
    g: &Graphon,
    exec: &E,
) -> Result<ApproximationErrors> {
    let n = weights.size();
    let grid = AlphaGrid::new(n)?;
    let eps1 = weights.coupling_error(g);
    let refs = REFERENCE_REFINEMENT * n;
    let alphas: Vec<f64> = (0..=refs).map(|k| k as f64 / refs as f64).collect();
    let mid: Vec<Result<MatrixPath>> = exec.map(n, |i| gmfg::extend(p, sol, grid.node(i)).map(|e| e.z));
    let mid = mid.into_iter().collect::<Result<Vec<_>>>()?;
    let gaps: Vec<Result<f64>> = exec.map(alphas.len(), |k| {
        let alpha = alphas[k];
        let cell = grid.cell_of(alpha);
        let z = gmfg::extend(p, sol, alpha)?.z;
        Ok(z.values.iter().zip(&mid[cell].values).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max))
    });
    let mut eps2 = 0.0f64;
    for gk in gaps {
        eps2 = eps2.max(gk?);
    }
    let mean = &p.spec.initial.mean;
    let eps3 = alphas
        .iter()
        .map(|&a| (mean.at(grid.node(grid.cell_of(a))) - mean.at(a)).amax())
        .fold(0.0, f64::max);
    Ok(ApproximationErrors { eps1, eps2, eps3 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashGapConfig {
    pub paths: usize,
    pub seed: u64,
    pub dt: Option<f64>,
    /// 0-based probe agents per `N`; `None` uses [`default_probes`].
    pub probes: Option<Vec<usize>>,
    /// Simulate the middle probe deviating to the auxiliary-problem feedback
    /// with this `δ′`.
    pub deviation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct DeviationRow {
    pub delta_prime: f64,
    pub cost: CostEstimate,
    /// Paired `𝒥_i(deviation) − 𝒥_i(û)`.
    pub change: PairedEstimate,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct NashGapRow {
    pub n_agents: usize,
    /// 1-based agent index.
    pub agent: usize,
    pub alpha: f64,
    pub j_hat: CostEstimate,
    /// Closed-form limit cost.
    pub j_limit: f64,
    /// `|j_hat.mean − j_limit|`.
    pub gap: f64,
    /// Limit cost by Monte Carlo on the same noise.
    pub j_limit_mc: CostEstimate,
    /// Paired `𝒥_i(û) − J_i(ū)` with common random numbers.
    pub paired: PairedEstimate,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub deviation: Option<DeviationRow>,
}

impl NashGapRow {
    /// 95% interval for `|𝒥_i(û) − J_i(ū)|` from the paired estimate.
    pub fn paired_interval(&self) -> (f64, f64) {
        let c = self.paired.mean.abs();
        let half = 1.96 * self.paired.std_error;
        ((c - half).max(0.0), c + half)
    }
}

/// Largest paired gap over the probe agents at one `N`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct GapSummary {
    pub n_agents: usize,
    pub agent: usize,
    pub gap: f64,
    pub lower: f64,
    pub upper: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct NashGapReport {
    pub rows: Vec<NashGapRow>,
}

impl NashGapReport {
    pub fn summaries(&self) -> Vec<GapSummary> {
        let mut out: Vec<GapSummary> = Vec::new();
        for row in &self.rows {
            let (lower, upper) = row.paired_interval();
            let gap = row.paired.mean.abs();
            let s = GapSummary {
                n_agents: row.n_agents,
                agent: row.agent,
                gap,
                lower,
                upper,
                eps1: row.eps1,
                eps2: row.eps2,
                eps3: row.eps3,
            };
            match out.last_mut() {
                Some(last) if last.n_agents == row.n_agents => {
                    if gap > last.gap {
                        *last = s;
                    }
                }
                _ => out.push(s),
            }
        }
        out
    }

    /// Least-squares slope of `log gap` against `log N`, negated.
    pub fn observed_order(&self) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .summaries()
            .iter()
            .filter(|s| s.gap > 0.0)
            .map(|s| (libm::log(s.n_agents as f64), libm::log(s.gap)))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let k = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        Some(-sxy / sxx)
    }
}

/// Simulates the population for every `N` in `n_list` and compares each
/// probe agent's cost with its limit cost.
pub fn nash_gap_experiment<E: Executor>(
    p: &Prepared,
    sol: &MeanFieldSolution,
    n_list: &[usize],
    cfg: &NashGapConfig,
    exec: &E,
) -> Result<NashGapReport> {
    let gamma = p.spec.coefficients.risk_sensitivity;
    let mut rows = Vec::new();
    for &n in n_list {
        let weights = p.graphon.sample_step(n)?;
        let pop = Population::new(p, sol, &weights, cfg.dt, exec)?;
        let eps = approximation_errors(p, sol, &weights, &p.graphon, exec)?;
        let probes = cfg.probes.clone().unwrap_or_else(|| default_probes(n));
        let sim = SimConfig {
            paths: cfg.paths,
            seed: cfg.seed,
            dt: cfg.dt,
            deviation: None,
            probes: Some(probes.clone()),
            record: false,
            limit_shadow: true,
        };
        let run = simulate_population(&pop, &sim, exec)?;
        let limit = run.limit_exponents.as_ref().expect("shadow requested");
        let deviator = probes[probes.len() / 2];
        for (j, &a) in probes.iter().enumerate() {
            let j_hat = CostEstimate::from_exponents(gamma, &run.exponents[j])?;
            let j_limit = pop.limit_cost(a)?;
            let deviation = match cfg.deviation {
                Some(delta) if a == deviator => {
                    let dev_cfg = SimConfig {
                        deviation: Some(Deviation { agent: a, strategy: DeviationStrategy::Acp(delta) }),
                        probes: Some(vec![a]),
                        limit_shadow: false,
                        ..sim.clone()
                    };
                    let dev = simulate_population(&pop, &dev_cfg, exec)?;
                    Some(DeviationRow {
                        delta_prime: delta,
                        cost: CostEstimate::from_exponents(gamma, &dev.exponents[0])?,
                        change: PairedEstimate::from_exponents(gamma, &dev.exponents[0], &run.exponents[j])?,
                    })
                }
                _ => None,
            };
            rows.push(NashGapRow {
                n_agents: n,
                agent: a + 1,
                alpha: pop.agents[a].alpha,
                gap: (j_hat.mean - j_limit).abs(),
                j_hat,
                j_limit,
                j_limit_mc: CostEstimate::from_exponents(gamma, &limit[j])?,
                paired: PairedEstimate::from_exponents(gamma, &run.exponents[j], &limit[j])?,
                eps1: eps.eps1,
                eps2: eps.eps2,
                eps3: eps.eps3,
                deviation,
            });
        }
    }
    Ok(NashGapReport { rows })
}
