"""End-to-end experiment orchestration.

Four commands cover the pipeline on a shared workspace directory:

* generate_data: synthesize the ground-truth field on its own
  correlation length, solve the flow problem, record noisy point
  observations.
* train_surrogate: Latin-hypercube design on the coarse coefficients,
  batched forward solves for targets, network training, serialization.
* run: sample the posterior with the configured strategy (vanilla MH
  on the exact model, delayed acceptance, or delayed acceptance with
  the adaptive error model), one trace file per chain.
* diagnose: autocorrelation/effective-sample-size/cost report plus
  posterior field statistics for one or more finished runs.

Every random draw derives from the single master seed through fixed
purpose keys, so any command rerun with the same configuration
reproduces its outputs bit for bit (wall-clock entries in manifests
excepted).
"""

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace  # noqa: F401  (replace is part of the API surface)
from pathlib import Path

import numpy as np

from . import __version__, fem
from ._core import HAVE_COMPILED_KERNELS
from .diagnostics import chain_cost, effective_sample_size, field_statistics, prune
from .errors import (
    InvalidArgumentError,
    ManifestIncompleteError,
)
from .random_field import (
    load_basis,
    realize,
    save_basis,
    truncate_basis,
    truncated_basis,
)
from .samplers import (
    AmKernel,
    ErrorModel,
    GaussianPrior,
    PcnKernel,
    StatModel,
    eem_from_prior,
    log_likelihood,
    run_da,
    run_mh,
)
from .surrogate import (
    SurrogateNet,
    TrainingConfig,
    design_spec,
    latin_hypercube,
    load_network,
    probit,
    rmse,
    save_network,
    split_training_set,
    train,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("vanilla", "da", "da-eem")
KERNELS = ("pcn", "am")

# purpose keys for deriving independent RNG streams from the master seed
KEY_TRUTH = 0
KEY_NOISE = 1
KEY_DESIGN = 2
KEY_NET_INIT = 3
KEY_SHUFFLE = 4
KEY_EEM_PRIOR = 5
KEY_CHAIN = 10

PAPER_SCALE_OVERRIDES = {"mesh_n": 50, "chains": 32, "chain_length": 20000,
                         "n_dnn": 16000, "offset": 4, "beta": 0.15}


@dataclass(frozen=True)
class ExperimentConfig:
    """Desk-scale defaults for the whole pipeline; every field can be
    overridden from a JSON config file."""

    mesh_n: int = 20
    k_coarse: int = 32
    k_fine: int = 64
    lengthscales_data: tuple = (0.11, 0.11)
    lengthscales_model: tuple = (0.10, 0.10)
    sigma: float = 1.0
    mu: float = 0.0
    noise_variance: float = 1e-3
    head_left: float = 1.0
    head_right: float = 0.0
    obs_start: float = 0.1
    obs_spacing: float = 0.2
    obs_count: int = 5
    strategy: str = "da-eem"
    kernel: str = "pcn"
    # desk-scale tuned step size; the single-stage baseline and the
    # paper-scale preset keep 0.15
    beta: float = 0.25
    am_sigma0: float = 0.01
    am_i0: int = 100
    am_gamma: float = 1e-6
    # subchain acceptances per promotion; 1 keeps the promotion rate
    # highest, larger values decorrelate promotions at extra coarse cost
    offset: int = 1
    chains: int = 4
    chain_length: int = 4000
    burn_in: int = 1000
    n_dnn: int = 4000
    epochs: int = 200
    batch_size: int = 50
    learning_rate: float = 1e-3
    rmsprop_rho: float = 0.9
    rmsprop_epsilon: float = 1e-8
    master_seed: int = 20260816
    workers: int = 0
    eem_harvest: str = "all"
    eem_prior_samples: int = 0
    allow_same_lengthscales: bool = False
    subchain_cap_factor: int = 100
    cov_size_limit: int = 5000
    solver_tol: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "lengthscales_data", tuple(self.lengthscales_data))
        object.__setattr__(self, "lengthscales_model", tuple(self.lengthscales_model))
        if self.strategy not in STRATEGIES:
            raise InvalidArgumentError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.kernel not in KERNELS:
            raise InvalidArgumentError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.eem_harvest not in ("all", "accepted"):
            raise InvalidArgumentError("eem_harvest must be 'all' or 'accepted'")
        if not (1 <= self.k_coarse < self.k_fine):
            raise InvalidArgumentError("need 1 <= k_coarse < k_fine")
        if (self.mesh_n + 1) ** 2 < self.k_fine:
            raise InvalidArgumentError("mesh too small for the requested number of modes")
        if self.mesh_n < 1 or self.chains < 1 or self.chain_length < 1:
            raise InvalidArgumentError("mesh_n, chains, chain_length must be positive")
        if not (0 <= self.burn_in < self.chain_length):
            raise InvalidArgumentError("burn_in must lie inside the chain length")
        if self.n_dnn < 10:
            raise InvalidArgumentError("n_dnn too small for a 9:1 split")
        if self.offset < 1 or self.subchain_cap_factor < 1:
            raise InvalidArgumentError("offset and subchain_cap_factor must be >= 1")
        if not (0 <= self.master_seed < 2 ** 64):
            raise InvalidArgumentError("master_seed must fit an unsigned 64-bit integer")
        if self.noise_variance < 0:
            raise InvalidArgumentError("noise_variance must be nonnegative")
        end = self.obs_start + (self.obs_count - 1) * self.obs_spacing
        if self.obs_count < 1 or self.obs_start < 0 or end > 1 + 1e-12:
            raise InvalidArgumentError("observation grid leaves the unit square")

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def with_paper_scale(self):
        return replace(self, **PAPER_SCALE_OVERRIDES)

    def to_dict(self):
        d = asdict(self)
        d["lengthscales_data"] = list(self.lengthscales_data)
        d["lengthscales_model"] = list(self.lengthscales_model)
        return d

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def derive_rng(master_seed, *key):
    """Independent generator for one purpose, keyed off the master seed
    through the seed-sequence spawn mechanism."""
    ss = np.random.SeedSequence(entropy=int(master_seed),
                                spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def observation_points(cfg):
    """Regular observation grid, x varying fastest."""
    ticks = cfg.obs_start + cfg.obs_spacing * np.arange(cfg.obs_count)
    xx, yy = np.meshgrid(ticks, ticks)
    return np.column_stack([xx.ravel(), yy.ravel()])


def boundary_conditions(cfg):
    return fem.BoundaryConditions(dirichlet={"left": cfg.head_left,
                                             "right": cfg.head_right})


def add_noise(noiseless, variance, rng):
    """Additive iid Gaussian observation noise.

    variance == 0 returns the noiseless vector unchanged (the rng is
    not consumed), so repeated zero-noise generation is bit stable.
    """
    if variance < 0:
        raise InvalidArgumentError("noise variance must be nonnegative")
    noiseless = np.asarray(noiseless, dtype=np.float64)
    if variance == 0.0:
        return noiseless.copy()
    return noiseless + np.sqrt(variance) * rng.standard_normal(noiseless.shape[0])


class FemForwardMap:
    """theta -> observed heads: realize the transmissivity field on the
    basis, assemble and solve the flow problem, read off the heads at
    the observation points."""

    def __init__(self, mesh, basis, bc, obs_points, solver_tol=1e-12):
        self.mesh = mesh
        self.basis = basis
        self.bc = bc
        self.obs_points = np.asarray(obs_points, dtype=np.float64)
        self.solver_tol = solver_tol

    def __call__(self, theta):
        field = realize(self.basis, theta)
        system = fem.assemble(self.mesh, field.t, self.bc)
        head = fem.solve_head(system, tol=self.solver_tol)
        return fem.observe(self.mesh, head, self.obs_points)


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _resolve_workers(cfg, upper):
    if cfg.workers > 0:
        return max(1, min(cfg.workers, upper))
    return max(1, min(os.cpu_count() or 1, upper, 8))


def _matrix_csv_save(path, arr):
    np.savetxt(path, np.asarray(arr, dtype=np.float64), fmt="%.17g", delimiter=",")


def save_chain_csv(path, run):
    """Trace file: step index, all coefficients, exact log-likelihood,
    acceptance flag of that step."""
    n, d = run.trace.shape
    header = "step," + ",".join(f"theta_{j}" for j in range(d)) + ",log_like_fine,accepted"
    body = np.column_stack([np.arange(1, n + 1), run.trace, run.log_likes, run.accepts])
    fmt = ["%d"] + ["%.17g"] * (d + 1) + ["%d"]
    np.savetxt(path, body, fmt=fmt, delimiter=",", header=header, comments="")


def load_chain_csv(path):
    with open(path) as f:
        header = f.readline().strip().split(",")
    if len(header) < 4 or header[0] != "step" or header[-2:] != ["log_like_fine", "accepted"]:
        raise InvalidArgumentError(f"malformed chain file {path}")
    d = len(header) - 3
    body = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {"trace": body[:, 1:1 + d], "log_likes": body[:, 1 + d],
            "accepts": body[:, 2 + d].astype(np.int8)}


# ---------------------------------------------------------------------------
# pipeline commands

def cmd_generate_data(cfg, out_dir):
    """Synthesize observations on the data lengthscale and persist the
    shared artifacts (mesh, bases, data record, truth head field).

    The ground truth is drawn on its own correlation length; sampling
    then runs on a deliberately different one.  Matching the two is
    refused unless allow_same_lengthscales is set, since inverting data
    with the exact prior that generated it overstates identifiability.
    """
    if (tuple(cfg.lengthscales_data) == tuple(cfg.lengthscales_model)
            and not cfg.allow_same_lengthscales):
        raise InvalidArgumentError(
            "data and sampling lengthscales are identical; set "
            "allow_same_lengthscales to accept the inverse crime")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    logger.info("building mesh n=%d and covariance bases", cfg.mesh_n)
    mesh = fem.build_unit_square_mesh(cfg.mesh_n)
    fem.save_mesh(out / "mesh.json", mesh)
    basis_model = truncated_basis(mesh, cfg.k_fine, cfg.lengthscales_model,
                                  sigma=cfg.sigma, mu=cfg.mu,
                                  size_limit=cfg.cov_size_limit)
    save_basis(out / "basis_model.json", basis_model)
    basis_data = truncated_basis(mesh, cfg.k_fine, cfg.lengthscales_data,
                                 sigma=cfg.sigma, mu=cfg.mu,
                                 size_limit=cfg.cov_size_limit)
    save_basis(out / "basis_data.json", basis_data)

    theta_star = derive_rng(cfg.master_seed, KEY_TRUTH).standard_normal(cfg.k_fine)
    field = realize(basis_data, theta_star)
    system = fem.assemble(mesh, field.t, boundary_conditions(cfg))
    head = fem.solve_head(system, tol=cfg.solver_tol)
    fem.save_head_csv(out / "truth_head.csv", head)

    pts = observation_points(cfg)
    noiseless = fem.observe(mesh, head, pts)
    d_obs = add_noise(noiseless, cfg.noise_variance,
                      derive_rng(cfg.master_seed, KEY_NOISE))
    record = {"d_obs": d_obs.tolist(), "noiseless": noiseless.tolist(),
              "theta_star": theta_star.tolist(), "obs_points": pts.tolist(),
              "noise_variance": cfg.noise_variance,
              "lengthscales_data": list(cfg.lengthscales_data),
              "mesh_hash": basis_model.mesh_hash,
              "master_seed": cfg.master_seed,
              "config_hash": cfg.config_hash()}
    with open(out / "data.json", "w") as f:
        json.dump(record, f, sort_keys=True, separators=(",", ":"))
    logger.info("wrote %d observations to %s", d_obs.shape[0], out / "data.json")
    return {"mesh": str(out / "mesh.json"), "data": str(out / "data.json"),
            "basis_model": str(out / "basis_model.json"),
            "basis_data": str(out / "basis_data.json"),
            "truth_head": str(out / "truth_head.csv")}


def _load_data(out):
    with open(Path(out) / "data.json") as f:
        return json.load(f)


def _require_artifacts(out, names):
    """Fail early with one message naming every missing workspace file."""
    missing = [name for name in names if not (Path(out) / name).exists()]
    if missing:
        raise ManifestIncompleteError(
            "workspace %s is missing %s; run the earlier pipeline stages first"
            % (out, ", ".join(missing)))


def cmd_train_surrogate(cfg, out_dir):
    """Build the training corpus with forward solves on the coarse
    parametrization, train the surrogate, and persist network, corpus,
    and timing manifest."""
    out = Path(out_dir)
    _require_artifacts(out, ("mesh.json", "basis_model.json", "data.json"))
    mesh = fem.load_mesh(out / "mesh.json")
    basis_model = load_basis(out / "basis_model.json", mesh)
    basis_coarse = truncate_basis(basis_model, cfg.k_coarse)
    data = _load_data(out)
    pts = np.asarray(data["obs_points"], dtype=np.float64)
    m = pts.shape[0]

    design = latin_hypercube(cfg.n_dnn, cfg.k_coarse,
                             derive_rng(cfg.master_seed, KEY_DESIGN))
    inputs = probit(design)
    fmap = FemForwardMap(mesh, basis_coarse, boundary_conditions(cfg), pts,
                         solver_tol=cfg.solver_tol)
    workers = _resolve_workers(cfg, cfg.n_dnn)
    logger.info("evaluating %d coarse forward solves (%d workers)", cfg.n_dnn, workers)
    t0 = time.monotonic()
    if workers == 1:
        targets = np.array([fmap(row) for row in inputs])
    else:
        chunk = max(1, cfg.n_dnn // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            targets = np.array(list(pool.map(fmap, inputs, chunksize=chunk)))
    t_fine = time.monotonic() - t0

    _matrix_csv_save(out / "training_inputs.csv", inputs)
    _matrix_csv_save(out / "training_targets.csv", targets)

    x_train, y_train, x_test, y_test = split_training_set(inputs, targets)
    net = SurrogateNet.initialize(design_spec(cfg.k_coarse, m),
                                  derive_rng(cfg.master_seed, KEY_NET_INIT))
    tconf = TrainingConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                           learning_rate=cfg.learning_rate,
                           rho=cfg.rmsprop_rho, epsilon=cfg.rmsprop_epsilon)
    logger.info("training %s for %d epochs on %d samples",
                net.spec.layer_sizes, cfg.epochs, x_train.shape[0])
    t0 = time.monotonic()
    history = train(net, x_train, y_train, tconf,
                    derive_rng(cfg.master_seed, KEY_SHUFFLE))
    t_train = time.monotonic() - t0
    test_rmse = rmse(net.forward_batch(x_test), y_test)
    logger.info("test RMSE %.5g (train loss %.5g -> %.5g)",
                test_rmse, history.initial_loss, history.final_loss)

    net.meta = {"n_dnn": cfg.n_dnn, "epochs": cfg.epochs,
                "batch_size": cfg.batch_size, "seed": cfg.master_seed,
                "test_rmse": test_rmse,
                "train_loss_initial": history.initial_loss,
                "train_loss_final": history.final_loss,
                "n_clamped": history.n_clamped}
    save_network(out / "network.json", net)

    manifest = {"n_dnn": cfg.n_dnn, "k_coarse": cfg.k_coarse, "m": m,
                "t_fine_s": t_fine, "t_train_s": t_train,
                "test_rmse": test_rmse, "config_hash": cfg.config_hash(),
                "files": {name: file_sha256(out / name)
                          for name in ("training_inputs.csv",
                                       "training_targets.csv", "network.json")}}
    with open(out / "training_manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return {"network": str(out / "network.json"), "test_rmse": test_rmse,
            "t_fine_s": t_fine, "t_train_s": t_train,
            "manifest": str(out / "training_manifest.json")}


def _make_kernel(cfg, dim):
    if cfg.kernel == "pcn":
        return PcnKernel(cfg.beta)
    return AmKernel(dim, sigma0=cfg.am_sigma0, i0=cfg.am_i0, gamma=cfg.am_gamma)


def _chain_worker(payload):
    """Run one chain and write its trace and stats; returns summary."""
    cfg = payload["cfg"]
    model = payload["model"]
    idx = payload["chain_index"]
    run_dir = Path(payload["run_dir"])
    rng = derive_rng(cfg.master_seed, KEY_CHAIN, idx)
    theta0 = rng.standard_normal(cfg.k_fine)
    prior = GaussianPrior(cfg.k_fine)

    if cfg.strategy == "vanilla":
        kernel = _make_kernel(cfg, cfg.k_fine)

        def loglike_fn(theta):
            return log_likelihood(model, model.fine(theta))

        run = run_mh(theta0, kernel, prior, loglike_fn, cfg.chain_length, rng)
        em = None
    else:
        coarse_kernel = _make_kernel(cfg, cfg.k_coarse)
        tilde_kernel = _make_kernel(cfg, cfg.k_fine - cfg.k_coarse)
        em = None
        if cfg.strategy == "da-eem":
            if cfg.eem_prior_samples > 0:
                em = eem_from_prior(model, cfg.eem_prior_samples,
                                    derive_rng(cfg.master_seed, KEY_EEM_PRIOR, idx))
            else:
                em = ErrorModel(model.m)
        run = run_da(theta0, model, prior, coarse_kernel, tilde_kernel,
                     cfg.offset, cfg.chain_length, rng, em=em,
                     harvest=cfg.eem_harvest, cap_factor=cfg.subchain_cap_factor)

    trace_name = f"chain_{idx:02d}.csv"
    stats_name = f"chain_{idx:02d}_stats.json"
    save_chain_csv(run_dir / trace_name, run)
    stats = {"coarse_steps": int(run.coarse_steps),
             "fine_steps": int(run.n_steps),
             "acc_rate_fine": run.acceptance_rate,
             "acc_rate_coarse": run.coarse_acceptance_rate,
             "wall_time_s": run.wall_time_s,
             "stalled": run.stalled,
             "stall_message": run.stall_message}
    with open(run_dir / stats_name, "w") as f:
        json.dump(stats, f, sort_keys=True, indent=1)
    snapshot = None
    if em is not None:
        snapshot = {"chain": idx, "count": em.count,
                    "mu_bias": em.mu_bias.tolist(),
                    "sigma_bias": em.sigma_bias.tolist()}
    return {"chain_index": idx, "trace": trace_name, "stats": stats_name,
            "wall_time_s": run.wall_time_s, "stalled": run.stalled,
            "acc_rate_fine": run.acceptance_rate, "error_model": snapshot}


def cmd_run(cfg, out_dir):
    """Sample the posterior with the configured strategy.

    Chains run in parallel processes, each on its own derived RNG
    stream, and write their own trace/stats files; a stalled subchain
    is reported per chain without stopping the others.
    """
    out = Path(out_dir)
    needed = ["mesh.json", "basis_model.json", "data.json"]
    if cfg.strategy != "vanilla":
        needed += ["network.json", "training_manifest.json"]
    _require_artifacts(out, needed)
    mesh = fem.load_mesh(out / "mesh.json")
    basis_model = load_basis(out / "basis_model.json", mesh)
    data = _load_data(out)
    pts = np.asarray(data["obs_points"], dtype=np.float64)
    d_obs = np.asarray(data["d_obs"], dtype=np.float64)
    m = d_obs.shape[0]

    fine_map = FemForwardMap(mesh, basis_model, boundary_conditions(cfg), pts,
                             solver_tol=cfg.solver_tol)
    coarse_map = None
    t_fine = t_train = 0.0
    if cfg.strategy != "vanilla":
        net = load_network(out / "network.json")
        if net.spec.n_inputs != cfg.k_coarse or net.spec.n_outputs != m:
            raise InvalidArgumentError(
                f"network maps {net.spec.n_inputs}->{net.spec.n_outputs}, "
                f"run needs {cfg.k_coarse}->{m}")
        coarse_map = net
        with open(out / "training_manifest.json") as f:
            tm = json.load(f)
        t_fine, t_train = tm["t_fine_s"], tm["t_train_s"]

    noise = np.full(m, cfg.noise_variance)
    model = StatModel(d_obs, noise, fine=fine_map, coarse=coarse_map,
                      k_fine=cfg.k_fine, k_coarse=cfg.k_coarse)

    run_dir = out / "runs" / cfg.strategy
    run_dir.mkdir(parents=True, exist_ok=True)
    payloads = [{"cfg": cfg, "model": model, "chain_index": i,
                 "run_dir": str(run_dir)} for i in range(cfg.chains)]
    workers = _resolve_workers(cfg, cfg.chains)
    logger.info("running %d %s chains of %d steps (%d workers)",
                cfg.chains, cfg.strategy, cfg.chain_length, workers)
    t0 = time.monotonic()
    if workers == 1 or cfg.chains == 1:
        results = [_chain_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chain_worker, payloads))
    total_wall = time.monotonic() - t0
    for res in results:
        if res["stalled"]:
            logger.warning("chain %d stalled; trace truncated", res["chain_index"])

    snapshots = [r["error_model"] for r in results if r["error_model"] is not None]
    if snapshots:
        with open(run_dir / "error_model.json", "w") as f:
            json.dump(snapshots, f, sort_keys=True, indent=1)

    manifest = {
        "version": __version__,
        "strategy": cfg.strategy,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "compiled_kernels": HAVE_COMPILED_KERNELS,
        "workspace": "../..",
        "timings": {"t_fine_s": t_fine, "t_train_s": t_train,
                    "t_run_s": [r["wall_time_s"] for r in results],
                    "total_wall_s": total_wall},
        "chains": [{"index": r["chain_index"], "trace": r["trace"],
                    "trace_sha256": file_sha256(run_dir / r["trace"]),
                    "stats": r["stats"],
                    "stats_sha256": file_sha256(run_dir / r["stats"]),
                    "stalled": r["stalled"]} for r in results],
        "shared_files": {rel: file_sha256(out / rel) for rel in
                         ("mesh.json", "basis_model.json", "data.json")},
    }
    with open(run_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    logger.info("run complete in %.1f s -> %s", total_wall, run_dir)
    return {"run_dir": str(run_dir), "manifest": str(run_dir / "manifest.json"),
            "stalled": [r["chain_index"] for r in results if r["stalled"]],
            "acc_rate_fine": float(np.mean([r["acc_rate_fine"] for r in results]))}


def _verify_manifest(run_dir):
    run_dir = Path(run_dir)
    path = run_dir / "manifest.json"
    if not path.exists():
        raise ManifestIncompleteError(f"no manifest.json under {run_dir}")
    with open(path) as f:
        manifest = json.load(f)
    try:
        entries = [(run_dir / c["trace"], c["trace_sha256"]) for c in manifest["chains"]]
        entries += [(run_dir / c["stats"], c["stats_sha256"]) for c in manifest["chains"]]
        workspace = run_dir / manifest.get("workspace", "../..")
        entries += [(workspace / rel, digest)
                    for rel, digest in manifest["shared_files"].items()]
    except KeyError as exc:
        raise ManifestIncompleteError(f"manifest {path} lacks field {exc}") from exc
    for fpath, digest in entries:
        if not Path(fpath).exists():
            raise ManifestIncompleteError(f"manifest references missing file {fpath}")
        if file_sha256(fpath) != digest:
            raise ManifestIncompleteError(f"hash mismatch for {fpath}")
    return manifest


def cmd_diagnose(run_dirs, out_dir):
    """Verify manifests, compute per-chain autocorrelation and cost
    summaries, aggregate per run, and export posterior field statistics.

    Returns the report dictionary (also written to report.json).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        manifest = _verify_manifest(run_dir)
        cfg = ExperimentConfig.from_dict(manifest["config"])
        workspace = run_dir.parent.parent
        mesh = fem.load_mesh(workspace / "mesh.json")
        basis_model = load_basis(workspace / "basis_model.json", mesh)
        timings = manifest["timings"]

        per_chain = []
        pooled = []
        for entry, t_run in zip(manifest["chains"], timings["t_run_s"]):
            chain = load_chain_csv(run_dir / entry["trace"])
            with open(run_dir / entry["stats"]) as f:
                stats = json.load(f)
            post = chain["trace"][cfg.burn_in:]
            if post.shape[0] < 10:
                logger.warning("chain %d has %d post-burn-in states; skipped",
                               entry["index"], post.shape[0])
                continue
            n_eff, taus = effective_sample_size(post)
            tau_max = float(taus.max())
            cost = chain_cost(timings["t_fine_s"], timings["t_train_s"],
                              t_run, n_eff, n_chains=cfg.chains)
            pooled.append(post)
            per_chain.append({
                "index": entry["index"], "fine_steps": stats["fine_steps"],
                "coarse_steps": stats["coarse_steps"],
                "acc_rate_fine": stats["acc_rate_fine"],
                "acc_rate_coarse": stats["acc_rate_coarse"],
                "tau_max": tau_max, "n_eff": n_eff,
                "pruned_states": int(prune(post, tau_max).shape[0]),
                "t_run_s": t_run,
                "cost_conservative": cost.conservative,
                "cost_normalized": cost.normalized,
                "stalled": entry["stalled"]})
        if not per_chain:
            raise ManifestIncompleteError(f"no usable chains under {run_dir}")

        def mean_of(key):
            return float(np.mean([c[key] for c in per_chain]))

        label = manifest["strategy"]
        row = {"run_dir": str(run_dir), "strategy": label,
               "chains_used": len(per_chain),
               "fine_steps": mean_of("fine_steps"),
               "coarse_steps": mean_of("coarse_steps"),
               "acc_rate_fine": mean_of("acc_rate_fine"),
               "acc_rate_coarse": mean_of("acc_rate_coarse"),
               "tau_max": mean_of("tau_max"),
               "n_eff": mean_of("n_eff"),
               "pruned_states": mean_of("pruned_states"),
               "t_fine_s": timings["t_fine_s"],
               "t_train_s": timings["t_train_s"],
               "t_run_s": mean_of("t_run_s"),
               "cost_conservative": mean_of("cost_conservative"),
               "cost_normalized": mean_of("cost_normalized"),
               "per_chain": per_chain}
        rows.append(row)

        mean_log_t, var_log_t = field_statistics(basis_model, np.vstack(pooled))
        stats_path = out / f"field_stats_{label}.csv"
        with open(stats_path, "w") as f:
            f.write("node_index,mean_logT,var_logT\n")
            for i, (mv, vv) in enumerate(zip(mean_log_t, var_log_t)):
                f.write(f"{i},{mv:.17g},{vv:.17g}\n")
        row["field_stats"] = str(stats_path)

    report = {"version": __version__, "rows": rows}
    with open(out / "report.json", "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
    logger.info("diagnostic report -> %s", out / "report.json")
    return report
