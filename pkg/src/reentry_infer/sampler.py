"""Adapted Metropolis-Hastings sampling of the region parameters.

The Gaussian random-walk proposal optionally adapts its covariance to the
sample covariance of the chain (scaled by s_d, regularized by epsilon) after
a warm-up of l0 iterations.  The accept-reject step builds the proposal's
mesh either from scratch or by relocating the last accepted mesh, so the
discretized likelihood stays locally continuous along the chain.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryParam, perimeter
from .inference import (
    STRATEGY_INDEPENDENT,
    STRATEGY_RELOCATION,
    ForwardSetup,
    NoiseModel,
    Prior,
    log_likelihood,
    log_prior,
)
from .mesh import PROV_FALLBACK, TriMesh, load_mvmesh, save_mvmesh

MODE_RANDOM_WALK = "random_walk"
MODE_ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class ProposalConfig:
    sigma0: np.ndarray  # 3x3 initial proposal covariance
    l0: int = 100
    s_d: float = 1.152
    epsilon: float = 1e-4
    mode: str = MODE_ADAPTIVE
    active: tuple = (True, True, True)  # components the proposal perturbs

    def __post_init__(self):
        s = np.asarray(self.sigma0, dtype=float)
        if s.shape != (3, 3):
            raise ValueError("sigma0 must be 3x3")
        if not np.allclose(s, s.T):
            raise ValueError("sigma0 must be symmetric")
        if self.l0 < 1:
            raise ValueError("l0 must be at least 1")


class _RunningCov:
    """Welford accumulator for the chain's sample covariance."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def push(self, x: np.ndarray):
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, x - self.mean)

    def cov(self) -> np.ndarray | None:
        if self.n < 2:
            return None
        return self.m2 / (self.n - 1)


@dataclass
class ChainState:
    samples: list  # list of length-3 arrays
    log_posts: list
    current_mesh: TriMesh | None
    rng: np.random.Generator
    accepted_flags: list = field(default_factory=list)
    fallback_flags: list = field(default_factory=list)
    solve_count: int = 0
    warnings: list = field(default_factory=list)
    _cov: _RunningCov | None = None

    def __post_init__(self):
        if not self.accepted_flags:
            self.accepted_flags = [0] * len(self.samples)
        if not self.fallback_flags:
            self.fallback_flags = [0] * len(self.samples)
        if self._cov is None:
            self._cov = _RunningCov(3)
            for s in self.samples:
                self._cov.push(np.asarray(s, dtype=float))

    @property
    def current(self) -> np.ndarray:
        return np.asarray(self.samples[-1], dtype=float)

    @property
    def iterations(self) -> int:
        return len(self.samples) - 1

    @property
    def accepted_count(self) -> int:
        return int(sum(self.accepted_flags))

    @property
    def fallback_count(self) -> int:
        return int(sum(self.fallback_flags))

    def record(self, sample: np.ndarray, log_post: float, accepted: bool, fallback: bool):
        self.samples.append(np.asarray(sample, dtype=float))
        self.log_posts.append(float(log_post))
        self.accepted_flags.append(1 if accepted else 0)
        self.fallback_flags.append(1 if fallback else 0)
        self._cov.push(np.asarray(sample, dtype=float))

    def sample_array(self) -> np.ndarray:
        return np.array(self.samples)


def propose(chain: ChainState, cfg: ProposalConfig) -> np.ndarray:
    """Draw a candidate as current + N(0, Sigma_l) restricted to active axes."""
    mask = np.array(cfg.active, dtype=bool)
    idx = np.where(mask)[0]
    sigma0 = np.asarray(cfg.sigma0, dtype=float)[np.ix_(idx, idx)]
    cov = sigma0
    if cfg.mode == MODE_ADAPTIVE and chain.iterations > cfg.l0:
        full = chain._cov.cov()
        if full is not None:
            cand = cfg.s_d * full[np.ix_(idx, idx)] + cfg.epsilon * np.eye(len(idx))
            try:
                chol = np.linalg.cholesky(cand)
            except np.linalg.LinAlgError:
                chain.warnings.append(f"iteration {chain.iterations}: adapted covariance "
                                      "not positive definite, using sigma0")
                chol = np.linalg.cholesky(sigma0)
            step = chol @ chain.rng.standard_normal(len(idx))
            out = chain.current.copy()
            out[idx] += step
            return out
    chol = np.linalg.cholesky(cov)
    step = chol @ chain.rng.standard_normal(len(idx))
    out = chain.current.copy()
    out[idx] += step
    return out


class PosteriorTarget:
    """Log-posterior of the PDE model: prior box + compressed likelihood."""

    def __init__(self, s_y, noise: NoiseModel, setup: ForwardSetup, prior: Prior,
                 strategy: str = STRATEGY_RELOCATION):
        self.s_y = s_y
        self.noise = noise
        self.setup = setup
        self.prior = prior
        self.strategy = strategy

    def in_support(self, theta: np.ndarray) -> bool:
        return self.prior.contains(theta)

    def initial_mesh(self, theta: np.ndarray) -> TriMesh:
        from .mesh import generate_mesh

        return generate_mesh(GeometryParam.from_array(theta), self.setup.dx, self.setup.domain)

    def log_posterior(self, theta: np.ndarray, base_mesh: TriMesh | None):
        lp = log_prior(theta, self.prior)
        if lp == -math.inf:
            return -math.inf, None, False
        ll, mesh = log_likelihood(self.s_y, GeometryParam.from_array(theta), self.noise,
                                  self.setup, self.strategy, base_mesh)
        fallback = mesh.provenance == PROV_FALLBACK
        return lp + ll, mesh, fallback


class GaussianTarget:
    """Analytic multivariate normal target; no PDE, no meshes.

    Inactive components (if any) are simply ignored by the density so the
    sampler machinery can be exercised in one to three dimensions.
    """

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        self.prec = np.linalg.inv(cov)
        self.dim = len(self.mean)

    def in_support(self, theta: np.ndarray) -> bool:
        return True

    def initial_mesh(self, theta: np.ndarray) -> None:
        return None

    def log_posterior(self, theta: np.ndarray, base_mesh):
        d = np.asarray(theta, dtype=float)[:self.dim] - self.mean
        return float(-0.5 * d @ self.prec @ d), None, False


def accept_reject(chain: ChainState, proposal: np.ndarray, target) -> bool:
    """Metropolis step; out-of-prior proposals are rejected without a solve.

    Mesh-generation or solver failures on a proposal count as zero posterior
    density: the proposal is rejected and the incident logged.
    """
    if not target.in_support(proposal):
        chain.record(chain.current, chain.log_posts[-1], accepted=False, fallback=False)
        return False
    try:
        lp_new, mesh, fallback = target.log_posterior(proposal, chain.current_mesh)
    except Exception as e:  # instability, quality failure, no convergence
        chain.warnings.append(f"iteration {chain.iterations + 1}: forward evaluation "
                              f"failed ({type(e).__name__}: {e}); proposal rejected")
        chain.record(chain.current, chain.log_posts[-1], accepted=False, fallback=False)
        chain.solve_count += 1
        return False
    chain.solve_count += 1
    lp_cur = chain.log_posts[-1]
    delta = lp_new - lp_cur
    accept = False
    if math.isfinite(lp_new):
        if delta >= 0:
            accept = True
        else:
            accept = math.log(chain.rng.random()) < delta
    if accept:
        chain.record(proposal, lp_new, accepted=True, fallback=fallback)
        if mesh is not None:
            chain.current_mesh = mesh
    else:
        chain.record(chain.current, lp_cur, accepted=False, fallback=fallback)
    return accept


def init_chain(theta0: np.ndarray, target, seed: int) -> ChainState:
    rng = np.random.default_rng(seed)
    theta0 = np.asarray(theta0, dtype=float)
    mesh0 = target.initial_mesh(theta0)
    lp0, mesh, _ = target.log_posterior(theta0, mesh0)
    if not math.isfinite(lp0):
        raise ValueError("initial sample has zero posterior density")
    state = ChainState(samples=[theta0], log_posts=[lp0],
                       current_mesh=mesh if mesh is not None else mesh0, rng=rng)
    state.solve_count += 1
    return state


def run_chain(target, theta0, cfg: ProposalConfig, n_iterations: int, seed: int,
              checkpoint_dir=None, checkpoint_every: int = 100,
              resume: bool = False) -> ChainState:
    """Drive propose/accept for n_iterations with optional checkpointing.

    Resuming restores the chain, generator state and relocation base mesh
    bit-exactly, so an interrupted run reproduces the uninterrupted one.
    """
    if resume and checkpoint_dir and os.path.exists(os.path.join(checkpoint_dir, "meta.json")):
        chain = load_checkpoint(checkpoint_dir, target)
    else:
        chain = init_chain(theta0, target, seed)
        if checkpoint_dir:
            save_checkpoint(chain, checkpoint_dir, seed)
    while chain.iterations < n_iterations:
        proposal = propose(chain, cfg)
        accept_reject(chain, proposal, target)
        if checkpoint_dir and (chain.iterations % checkpoint_every == 0
                               or chain.iterations == n_iterations):
            save_checkpoint(chain, checkpoint_dir, seed)
    if checkpoint_dir:
        save_checkpoint(chain, checkpoint_dir, seed)
    return chain


CHAIN_HEADER = "iter,a,b,phi,log_post,accepted,strategy_fallback"


def chain_rows(chain: ChainState) -> list[str]:
    rows = [CHAIN_HEADER]
    for k, (s, lp) in enumerate(zip(chain.samples, chain.log_posts)):
        rows.append(f"{k},{s[0]:.17g},{s[1]:.17g},{s[2]:.17g},{lp:.17g},"
                    f"{chain.accepted_flags[k]},{chain.fallback_flags[k]}")
    return rows


def save_chain_csv(chain: ChainState, path):
    with open(path, "w") as f:
        f.write("\n".join(chain_rows(chain)) + "\n")


def load_chain_csv(path):
    samples, log_posts, accepted, fallback = [], [], [], []
    with open(path) as f:
        header = f.readline().strip()
        if header != CHAIN_HEADER:
            raise ValueError(f"unexpected chain header: {header}")
        for line in f:
            parts = line.strip().split(",")
            samples.append(np.array([float(parts[1]), float(parts[2]), float(parts[3])]))
            log_posts.append(float(parts[4]))
            accepted.append(int(parts[5]))
            fallback.append(int(parts[6]))
    return samples, log_posts, accepted, fallback


def save_checkpoint(chain: ChainState, directory, seed: int):
    os.makedirs(directory, exist_ok=True)
    tmp = os.path.join(directory, "chain.csv.tmp")
    save_chain_csv(chain, tmp)
    os.replace(tmp, os.path.join(directory, "chain.csv"))
    state = {
        "seed": seed,
        "rng_state": chain.rng.bit_generator.state,
        "solve_count": chain.solve_count,
        "warnings": chain.warnings,
        "has_mesh": chain.current_mesh is not None,
    }
    if chain.current_mesh is not None:
        mesh = chain.current_mesh
        save_mvmesh(mesh, os.path.join(directory, "current_mesh.mvmesh.tmp"))
        os.replace(os.path.join(directory, "current_mesh.mvmesh.tmp"),
                   os.path.join(directory, "current_mesh.mvmesh"))
        state["mesh_built_for"] = [mesh.built_for.a, mesh.built_for.b, mesh.built_for.phi,
                                   mesh.built_for.center[0], mesh.built_for.center[1]]
        state["mesh_dx"] = mesh.dx
        state["mesh_domain"] = list(mesh.domain)
        state["mesh_provenance"] = mesh.provenance
    tmp = os.path.join(directory, "meta.json.tmp")
    with open(tmp, "w") as f:
        json.dump(state, f, indent=1, sort_keys=True, default=int)
        f.write("\n")
    os.replace(tmp, os.path.join(directory, "meta.json"))


def load_checkpoint(directory, target) -> ChainState:
    with open(os.path.join(directory, "meta.json")) as f:
        state = json.load(f)
    samples, log_posts, accepted, fallback = load_chain_csv(os.path.join(directory, "chain.csv"))
    rng = np.random.default_rng(state["seed"])
    rng.bit_generator.state = state["rng_state"]
    mesh = None
    if state.get("has_mesh"):
        bf = state["mesh_built_for"]
        mesh = load_mvmesh(os.path.join(directory, "current_mesh.mvmesh"),
                           built_for=GeometryParam(bf[0], bf[1], bf[2], (bf[3], bf[4])),
                           dx=state["mesh_dx"], domain=tuple(state["mesh_domain"]),
                           provenance=state.get("mesh_provenance", "independent"))
    chain = ChainState(samples=samples, log_posts=log_posts, current_mesh=mesh, rng=rng,
                       accepted_flags=accepted, fallback_flags=fallback,
                       solve_count=state["solve_count"],
                       warnings=list(state.get("warnings", [])))
    return chain


def integrated_autocorrelation_time(x: np.ndarray) -> float:
    """Initial-positive-sequence estimate of the autocorrelation time."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 4:
        return 1.0
    x = x - x.mean()
    var = float(x @ x) / n
    if var == 0:
        return 1.0
    # autocovariances via FFT
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    acf = np.fft.irfft(f * np.conj(f), m)[:n].real / (n * var)
    tau = 0.0
    k = 0
    while 2 * k + 1 < n:
        gamma = acf[2 * k] + acf[2 * k + 1]
        if gamma <= 0:
            break
        tau += gamma
        k += 1
    return max(2.0 * tau - 1.0, 1.0)


def diagnostics(chain: ChainState) -> dict:
    """Summary statistics of a chain: moments, MAP, mixing, perimeters."""
    samples = chain.sample_array()
    if len(samples) < 2:
        raise ValueError("diagnostics need at least two chain entries")
    log_posts = np.array(chain.log_posts)
    n_iter = len(samples) - 1
    map_idx = int(np.argmax(log_posts))
    perims = np.array([perimeter(GeometryParam(max(s[0], 1e-9), max(s[1], 1e-9), 0.0))
                       for s in samples])
    cov = np.cov(samples.T, ddof=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr_ab = float(np.corrcoef(samples[:, 0], samples[:, 1])[0, 1])
    if not math.isfinite(corr_ab):
        corr_ab = 0.0
    return {
        "n_samples": len(samples),
        "acceptance_rate": chain.accepted_count / n_iter if n_iter else 0.0,
        "fallback_count": chain.fallback_count,
        "solve_count": chain.solve_count,
        "mean": samples.mean(axis=0).tolist(),
        "variance": samples.var(axis=0, ddof=1).tolist(),
        "covariance": cov.tolist(),
        "corr_ab": corr_ab,
        "map": samples[map_idx].tolist(),
        "map_log_post": float(log_posts[map_idx]),
        "map_index": map_idx,
        "iact": [integrated_autocorrelation_time(samples[:, j]) for j in range(3)],
        "perimeter_mean": float(perims.mean()),
        "perimeter": perims,
    }


def write_diagnostics(chain: ChainState, out_dir, bins: int = 50):
    """Persist the report plus histogram and scatter CSVs."""
    os.makedirs(out_dir, exist_ok=True)
    rep = diagnostics(chain)
    samples = chain.sample_array()
    perims = rep.pop("perimeter")
    for j, name in enumerate(("a", "b", "phi")):
        counts, edges = np.histogram(samples[:, j], bins=bins)
        path = os.path.join(out_dir, f"hist_{name}.csv")
        with open(path, "w") as f:
            f.write("bin_left,bin_right,count\n")
            for k in range(len(counts)):
                f.write(f"{edges[k]:.17g},{edges[k + 1]:.17g},{counts[k]}\n")
    with open(os.path.join(out_dir, "ab_scatter.csv"), "w") as f:
        f.write("iter,a,b,perimeter\n")
        for k, (s, p) in enumerate(zip(samples, perims)):
            f.write(f"{k},{s[0]:.17g},{s[1]:.17g},{p:.17g}\n")
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(rep, f, indent=1, sort_keys=True)
        f.write("\n")
    return rep
