"""Command-line interface: prepace, generate-data, sigma-d, sample, diagnose."""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np
import scipy.sparse as sp

from .config import ConfigError, RunConfig, format_config, load_config
from .features import (
    NoReentryError,
    features_from_traces,
    find_t0,
    grid_activations,
)
from .inference import (
    ForwardSetup,
    NoiseModel,
    build_sigma_eps,
    default_workers,
    estimate_sigma_d,
    load_sigma_d,
    save_sigma_d,
)
from .interp import interpolation_matrix
from .mesh import generate_mesh
from .observe import (
    EgmTraces,
    ElectrodeArray,
    add_noise,
    egm_weights,
    load_traces,
    save_traces,
    save_traces_meta,
)
from .prepace import (
    NoSpiralError,
    PrepaceProtocol,
    load_snapshot,
    run_prepacing,
    save_snapshot,
)
from .sampler import (
    PosteriorTarget,
    ProposalConfig,
    load_chain_csv,
    ChainState,
    run_chain,
    save_chain_csv,
    write_diagnostics,
)
from .solver import DiffusionField, run_forward

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NO_SPIRAL = 2


def _resolve(cfg: RunConfig, name: str) -> str:
    path = getattr(cfg.paths, name)
    if os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(cfg.paths.out_dir, path))


def _atomic_write(path, writer):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    writer(tmp)
    os.replace(tmp, path)


def _protocol(cfg: RunConfig) -> PrepaceProtocol:
    p = cfg.prepace
    return PrepaceProtocol(
        theta_ref=cfg.theta_ref(), gamma=p.gamma, dx=cfg.numerics.dx, dt=cfg.numerics.dt,
        domain=cfg.domain.bounds, s1_region=tuple(p.s1_region), s1_time=p.s1_time,
        s2_region=tuple(p.s2_region), s2_time=p.s2_time, stim_duration=p.stim_duration,
        steady_tol=p.steady_tol, min_periods=p.min_periods, max_duration=p.max_duration,
        check_interval=p.check_interval, cell=cfg.physics.cell_params())


def _forward_setup(cfg: RunConfig, snapshot) -> ForwardSetup:
    return ForwardSetup(
        snapshot=snapshot, electrodes=ElectrodeArray.default(cfg.experiment.electrode_z),
        gamma=cfg.experiment.gamma, dx=cfg.numerics.dx, dt=cfg.numerics.dt,
        t_end=cfg.model_t_end(), domain=cfg.domain.bounds, dtau=cfg.numerics.dtau,
        cell=cfg.physics.cell_params(), cg_tol=cfg.numerics.cg_tol)


def cmd_prepace(cfg: RunConfig, args) -> int:
    snap = run_prepacing(_protocol(cfg))
    path = _resolve(cfg, "snapshot")
    _atomic_write(path, lambda p: save_snapshot(snap, p))
    print(f"snapshot written to {path} (t={snap.state.t:.0f} ms, "
          f"period={float(snap.metadata['period']):.2f} ms)")
    return EXIT_OK


def cmd_generate_data(cfg: RunConfig, args) -> int:
    snap = load_snapshot(_resolve(cfg, "snapshot"))
    theta = cfg.theta_true()
    electrodes = ElectrodeArray.default(cfg.experiment.electrode_z)
    regions = [theta]
    if snap.mesh.built_for is not None:
        regions.append(snap.mesh.built_for)
    electrodes.validate_clearance(regions)

    mesh = generate_mesh(theta, cfg.numerics.dx, cfg.domain.bounds)
    from .prepace import transfer_state

    init = transfer_state(snap, mesh)
    init.t = 0.0
    Wvm, _ = interpolation_matrix(mesh, electrodes.xy, nearest_fallback=False)
    Wegm = egm_weights(mesh, electrodes, sigma_i=cfg.physics.sigma_i,
                       sigma_b=cfg.physics.sigma_b)
    probe = sp.vstack([Wvm, Wegm]).tocsr()
    sample_every = int(round(cfg.numerics.dtau / cfg.numerics.dt))
    fs = run_forward(mesh, init, DiffusionField(cfg.physics.d_healthy(), cfg.experiment.gamma),
                     cfg.numerics.dt, cfg.experiment.t_experiment,
                     params=cfg.physics.cell_params(), record_frames=False,
                     probe_matrix=probe, probe_every=sample_every, cg_tol=cfg.numerics.cg_tol)
    vm_tr = fs.probe_values[:20]
    egm_tr = fs.probe_values[20:]
    times = fs.probe_times
    t0 = find_t0(grid_activations(times, vm_tr[3]))
    win = times >= t0 - 1e-9
    clean = EgmTraces(egm_tr[:, win], tau0=t0, dtau=cfg.numerics.dtau)
    noisy = add_noise(clean, cfg.experiment.sigma2, cfg.experiment.seed)

    # consistency check of the dataset: electrogram features must agree with
    # the transmembrane features of the same solution up to detection lag
    s_egm = features_from_traces(times[win], noisy.values, "egm")
    s_vm = features_from_traces(times[win], vm_tr[:, win], "vm")
    if abs(s_egm.period - s_vm.period) > 5.0:
        raise RuntimeError("dataset inconsistency: electrogram and transmembrane "
                           f"periods differ by {abs(s_egm.period - s_vm.period):.2f} ms")

    meta = {
        "theta_true": list(cfg.experiment.theta_true),
        "hole_center": list(cfg.domain.center),
        "gamma": cfg.experiment.gamma,
        "dx": cfg.numerics.dx,
        "dt": cfg.numerics.dt,
        "t_experiment": cfg.experiment.t_experiment,
        "electrodes": [list(map(float, row)) for row in electrodes.positions],
    }
    csv_path = _resolve(cfg, "traces")
    meta_path = _resolve(cfg, "traces_meta")
    _atomic_write(csv_path, lambda p: save_traces(noisy, p))
    _atomic_write(meta_path, lambda p: save_traces_meta(noisy, p, meta=meta))
    print(f"traces written to {csv_path} (T0={t0:.0f} ms, "
          f"{noisy.values.shape[1]} samples/electrode, period~{s_egm.period:.1f} ms)")
    return EXIT_OK


def cmd_sigma_d(cfg: RunConfig, args) -> int:
    snap = load_snapshot(_resolve(cfg, "snapshot"))
    setup = _forward_setup(cfg, snap)
    sigma_d, info = estimate_sigma_d(
        cfg.theta_true(), setup, half_width=cfg.noise.sigma_d_half_width,
        step=cfg.noise.sigma_d_step, inflation=cfg.noise.sigma_d_inflation,
        n_workers=args.workers)
    for idx in info["fallbacks"]:
        print(f"warning: sweep mesh {idx} fell back to independent meshing", file=sys.stderr)
    provenance = {
        "theta_ref": list(cfg.experiment.theta_true),
        "dx": cfg.numerics.dx, "dt": cfg.numerics.dt, "gamma": cfg.experiment.gamma,
        "half_width": cfg.noise.sigma_d_half_width, "step": cfg.noise.sigma_d_step,
        "inflation": cfg.noise.sigma_d_inflation, "n_sweep": info["n_sweep"],
        "fallbacks": info["fallbacks"],
    }
    path = _resolve(cfg, "sigma_d")
    _atomic_write(path, lambda p: save_sigma_d(sigma_d, p, provenance))
    print(f"sigma_d written to {path}: {sigma_d.tolist()}")
    return EXIT_OK


def _noise_model(cfg: RunConfig) -> NoiseModel:
    eps = build_sigma_eps()
    mode = cfg.noise.mode
    if mode == "custom":
        diag = cfg.noise.custom_diag
        total = np.full(21, float(diag[0])) if len(diag) == 1 else np.array(diag, dtype=float)
        return NoiseModel(total, np.zeros(21))
    if mode == "eps_only":
        return NoiseModel(eps, np.zeros(21))
    sigma_d = load_sigma_d(_resolve(cfg, "sigma_d"))
    return NoiseModel(eps, sigma_d)


def cmd_sample(cfg: RunConfig, args) -> int:
    snap = load_snapshot(_resolve(cfg, "snapshot"))
    traces = load_traces(_resolve(cfg, "traces"), _resolve(cfg, "traces_meta"))
    s_y = features_from_traces(traces.times, traces.values, "egm")
    noise = _noise_model(cfg)
    setup = _forward_setup(cfg, snap)
    strategy = "relocation" if cfg.sampler.strategy == "relocation" else "independent"
    target = PosteriorTarget(s_y, noise, setup, cfg.prior.prior(), strategy)
    theta0 = np.array(cfg.sampler.theta0 or cfg.prior.prior().midpoint())
    prop = ProposalConfig(sigma0=np.diag(cfg.sampler.sigma0_diag), l0=cfg.sampler.l0,
                          s_d=cfg.sampler.s_d, epsilon=cfg.sampler.epsilon,
                          mode=cfg.sampler.mode, active=tuple(cfg.sampler.active))
    chain_dir = _resolve(cfg, "chain_dir")
    chain = run_chain(target, theta0, prop, cfg.sampler.n_iterations,
                      seed=cfg.experiment.seed, checkpoint_dir=chain_dir,
                      checkpoint_every=cfg.sampler.checkpoint_every, resume=args.resume)
    rate = chain.accepted_count / max(chain.iterations, 1)
    print(f"chain written to {chain_dir} ({chain.iterations} iterations, "
          f"acceptance rate {rate:.3f}, {chain.fallback_count} relocation fallbacks)")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, args) -> int:
    chain_dir = _resolve(cfg, "chain_dir")
    samples, log_posts, accepted, fallback = load_chain_csv(os.path.join(chain_dir, "chain.csv"))
    chain = ChainState(samples=samples, log_posts=log_posts, current_mesh=None,
                       rng=np.random.default_rng(0), accepted_flags=accepted,
                       fallback_flags=fallback)
    out = _resolve(cfg, "diagnostics_dir")
    rep = write_diagnostics(chain, out)
    print(f"diagnostics written to {out}: acceptance_rate={rep['acceptance_rate']:.3f} "
          f"mean={np.round(rep['mean'], 4).tolist()} corr_ab={rep['corr_ab']:.4f}")
    return EXIT_OK


COMMANDS = {
    "prepace": cmd_prepace,
    "generate-data": cmd_generate_data,
    "sigma-d": cmd_sigma_d,
    "sample": cmd_sample,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reentry-infer",
        description="Bayesian estimation of an elliptical non-conducting region "
                    "from synthetic electrograms")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--seed", type=int, help="override the experiment seed")
    parser.add_argument("--out", help="override the output directory")
    parser.add_argument("--print-config", action="store_true",
                        help="echo the fully resolved configuration and exit")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "sample":
            p.add_argument("--resume", action="store_true",
                           help="continue from the checkpoint directory")
        if name == "sigma-d":
            p.add_argument("--workers", type=int, default=None,
                           help=f"parallel solves (default {default_workers()})")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    if args.seed is not None:
        cfg.experiment.seed = args.seed
    if args.out is not None:
        cfg.paths.out_dir = args.out
    if args.print_config:
        print(format_config(cfg), end="")
        return EXIT_OK
    if not args.command:
        print("error: no command given (expected one of "
              f"{', '.join(COMMANDS)})", file=sys.stderr)
        return EXIT_ERROR
    try:
        return COMMANDS[args.command](cfg, args)
    except NoSpiralError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NO_SPIRAL
    except (NoReentryError, ConfigError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
