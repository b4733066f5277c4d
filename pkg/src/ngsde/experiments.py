"""Builders that turn a validated config into model objects, datasets,
fits, archives, and metrics.  Used by the CLI; importable for tests."""

import json
import os
from dataclasses import replace

import numpy as np

from .baselines import kalman_smooth, vdp_fit, vdp_marginals
from .chain import MeanParams
from .config import ConfigError
from .dataio import Dataset, append_jsonl
from .dynamics import (
    DiffusionSpec,
    DuffingDrift,
    EmbeddedLorenzDrift,
    InitialState,
    LinearDrift,
    LorenzDrift,
    PolynomialDrift,
    VanDerPolDrift,
    euler_maruyama_sample,
    monomial_exponents,
    trial_rng,
)
from .errors import NGSDEError
from .expectations import ExpectationConfig
from .gp import GPDrift, InducingPoints, InducingPosterior, RBFKernel
from .grids import TimeGrid
from .inference import (
    ModelBundle,
    RhoSchedule,
    SINGConfig,
    fit,
    latents_rmse,
)
from .learning import VEMConfig, dynamics_rmse, vem_fit
from .observations import (
    GaussianObservation,
    PoissonExpObservation,
    PoissonRBFObservation,
    simulate_observations,
)


# ---------------------------------------------------------------------------
# model pieces from config
# ---------------------------------------------------------------------------


def build_drift(model_cfg, dt=None):
    spec = model_cfg.get("drift", {})
    kind = spec.get("kind", "linear")
    dim = model_cfg.get("dim", 2)
    if kind == "linear":
        if "spiral_theta" in spec:
            # discrete contraction-rotation map expressed as a drift
            theta = float(spec["spiral_theta"])
            decay = float(spec.get("spiral_decay", 0.997))
            if dt is None:
                raise ConfigError("spiral drift needs the grid step")
            rot = np.array([[np.cos(theta), -np.sin(theta)],
                            [np.sin(theta), np.cos(theta)]])
            A = (decay * rot - np.eye(2)) / dt
            return LinearDrift(A=A, b=np.zeros(2))
        A = np.asarray(spec.get("A", -0.5 * np.eye(dim)), dtype=float)
        b = np.asarray(spec.get("b", np.zeros(dim)), dtype=float)
        return LinearDrift(A=A, b=b)
    if kind == "polynomial":
        degree = int(spec.get("degree", 3))
        k = len(monomial_exponents(dim, degree))
        return PolynomialDrift(weights=np.zeros((dim, k)), degree=degree)
    if kind == "lorenz":
        return LorenzDrift(alpha=spec.get("alpha", 10.0),
                           rho=spec.get("rho", 28.0),
                           beta=spec.get("beta", 8.0 / 3.0))
    if kind == "embedded_lorenz":
        return EmbeddedLorenzDrift(dim_total=dim,
                                   alpha=spec.get("alpha", 10.0),
                                   rho=spec.get("rho", 28.0),
                                   beta=spec.get("beta", 8.0 / 3.0))
    if kind == "van_der_pol":
        return VanDerPolDrift(tau=spec.get("tau", 10.0),
                              mu=spec.get("mu", 2.0))
    if kind == "duffing":
        return DuffingDrift(alpha=spec.get("alpha", 2.0),
                            beta=spec.get("beta", 1.0),
                            gamma=spec.get("gamma", 0.1))
    raise ConfigError(f"unknown drift kind: {kind}")


def build_diffusion(model_cfg):
    dim = model_cfg.get("dim", 2)
    spec = model_cfg.get("diffusion", {})
    if "matrix" in spec:
        return DiffusionSpec(Sigma=np.asarray(spec["matrix"], dtype=float))
    return DiffusionSpec.isotropic(dim, float(spec.get("variance", 1.0)))


def build_initial(model_cfg):
    dim = model_cfg.get("dim", 2)
    spec = model_cfg.get("initial", {})
    mean = np.asarray(spec.get("mean", np.zeros(dim)), dtype=float)
    cov = float(spec.get("cov", 1.0)) * np.eye(dim)
    return InitialState(nu=mean, V=cov)


def _reference_centers(cfg, drift, diffusion, initial, grid, n_out, burn_in):
    """Tuning-curve centers spread along the first simulated latent path.

    Re-simulating trial 0 from the dataset seed keeps the observation model
    a deterministic function of the config (centers on the trajectory, as
    in the place-cell construction).
    """
    seed = int(cfg["dataset"].get("seed", cfg.get("seed", 0)))
    path = _sample_latents(cfg, drift, diffusion, initial, grid, seed, 1)[0]
    start = int(burn_in * (grid.num_steps + 1))
    sel = np.linspace(start, grid.num_steps, n_out).astype(int)
    return path[sel]


def build_observation(cfg, drift, diffusion, initial, grid):
    model_cfg = cfg["model"]
    spec = model_cfg.get("observation", {})
    kind = spec.get("kind", "gaussian")
    dim = model_cfg.get("dim", 2)
    n_out = int(spec.get("n_out", 10))
    seed = int(spec.get("param_seed", cfg.get("seed", 0)))
    rng = np.random.default_rng([seed, 101])
    if kind == "gaussian":
        c_scale = float(spec.get("c_scale", 1.0))
        d_scale = float(spec.get("d_scale", 1.0))
        C = c_scale * rng.standard_normal((n_out, dim))
        d = d_scale * rng.standard_normal(n_out)
        r = float(spec.get("r_diag", 0.1)) * np.ones(n_out)
        return GaussianObservation(C=C, d=d, R_diag=r)
    if kind == "poisson_rbf":
        centers = _reference_centers(
            cfg, drift, diffusion, initial, grid, n_out,
            float(spec.get("center_burn_in", 0.25)),
        )
        return PoissonRBFObservation(
            centers=centers,
            width=float(spec.get("width", 0.5)),
            peak=float(spec.get("peak", 2.5)),
            baseline=float(spec.get("baseline", 0.25)),
        )
    if kind == "poisson_exp":
        C = float(spec.get("c_scale", 1.0)) * rng.standard_normal((n_out, dim))
        d = float(spec.get("d_scale", 0.0)) * rng.standard_normal(n_out)
        return PoissonExpObservation(C=C, d=d)
    raise ConfigError(f"unknown observation kind: {kind}")


def build_grid(cfg):
    ds = cfg["dataset"]
    dt = float(ds["dt"])
    t_max = float(ds["t_max"])
    grid = TimeGrid.regular(dt, t_max)
    n = grid.num_steps + 1
    mask = np.zeros(n, dtype=bool)
    if "obs_fraction" in ds:
        frac = float(ds["obs_fraction"])
        rng = np.random.default_rng([int(ds.get("obs_seed", ds.get("seed", 0))), 77])
        k = int(round(frac * n))
        mask[rng.choice(n, size=k, replace=False)] = True
    else:
        every = int(ds.get("obs_every", 1))
        mask[::every] = True
    return grid.with_mask(mask)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


def generate_dataset(cfg):
    """Simulate latents and observations per the config; fully deterministic
    given the config seeds."""
    ds = cfg["dataset"]
    if ds.get("kind", "generate") != "generate":
        raise ConfigError("generate_dataset requires dataset.kind: generate")
    grid = build_grid(cfg)
    drift = build_drift(cfg["model"], dt=grid.deltas[0])
    diffusion = build_diffusion(cfg["model"])
    initial = build_initial_for_sampling(cfg, grid)
    observation = build_observation(cfg, drift, diffusion, initial, grid)
    seed = int(ds.get("seed", cfg.get("seed", 0)))
    trials = int(ds.get("trials", 1))
    latents = _sample_latents(cfg, drift, diffusion, initial, grid, seed,
                              trials)
    y = simulate_observations(observation, latents, grid, seed + 1)
    return Dataset(grid=grid, y=y, config=cfg, latents=latents)


def build_initial_for_sampling(cfg, grid):
    return build_initial(cfg["model"])


def _sample_latents(cfg, drift, diffusion, initial, grid, seed, trials):
    spec = cfg["model"].get("initial", {})
    box = spec.get("uniform_box")
    if box is None:
        return euler_maruyama_sample(drift, diffusion, initial, grid, seed,
                                     trials)
    # initial conditions uniform in [-box, box]^D, diffusion noise elsewhere
    dim = initial.dim
    out = np.empty((trials, grid.num_steps + 1, dim))
    for trial in range(trials):
        rng = trial_rng(seed, trial)
        x = rng.uniform(-box, box, size=dim)
        out[trial, 0] = x
        noise = rng.standard_normal((grid.num_steps, dim))
        for i, dt in enumerate(grid.deltas):
            x = x + dt * drift.value(x) + np.sqrt(dt) * (diffusion.chol @ noise[i])
            out[trial, i + 1] = x
    return out


def build_bundle(cfg, dataset):
    grid = dataset.grid
    drift = build_drift(cfg["model"], dt=grid.deltas[0])
    diffusion = build_diffusion(cfg["model"])
    initial = build_initial(cfg["model"])
    observation = build_observation(cfg, drift, diffusion, initial, grid)
    return ModelBundle(
        drift=drift, diffusion=diffusion, initial=initial,
        observation=observation, grid=grid, y=dataset.y,
        true_latents=dataset.latents,
    )


# ---------------------------------------------------------------------------
# inference / learning configs from config dicts
# ---------------------------------------------------------------------------


def build_rho(spec):
    spec = spec or {}
    kind = spec.get("kind", "constant")
    if kind == "constant":
        return RhoSchedule(kind="constant", rho=float(spec.get("rho", 1.0)))
    return RhoSchedule(
        kind="log_linear_ramp",
        rho_start=float(spec.get("rho_start", 1e-3)),
        rho_end=float(spec.get("rho_end", 10 ** -1.5)),
        ramp_iters=int(spec.get("ramp_iters", 10)),
    )


def build_expectation(spec, seed=0):
    spec = spec or {}
    return ExpectationConfig(
        method=spec.get("method", "quadrature"),
        nodes_per_dim=int(spec.get("nodes_per_dim", 6)),
        samples=int(spec.get("samples", 1)),
        seed=seed,
    )


def build_sing_config(cfg):
    inf = cfg.get("inference", {})
    return SINGConfig(
        iterations=int(inf.get("iterations", 100)),
        rho_schedule=build_rho(inf.get("rho")),
        expectation=build_expectation(inf.get("expectation"),
                                      seed=int(cfg.get("seed", 0))),
        max_halvings=int(inf.get("max_halvings", 10)),
        conversion=inf.get("conversion", "auto"),
        seed=int(cfg.get("seed", 0)),
    )


def build_vem_config(cfg):
    lrn = cfg.get("learning")
    if lrn is None:
        return None
    gp = lrn.get("gp", {})
    return VEMConfig(
        outer_iters=int(lrn.get("outer_iters", 50)),
        e_steps_per_iter=int(lrn.get("e_steps_per_iter", 10)),
        m_steps_per_iter=int(lrn.get("m_steps_per_iter", 50)),
        learn_output=bool(lrn.get("learn_output", True)),
        learn_r=bool(lrn.get("learn_r", False)),
        learn_drift=bool(lrn.get("learn_drift", True)),
        drift_lr=float(lrn.get("drift_lr", 1e-2)),
        kernel_lr=float(gp.get("kernel_lr", 5e-2)),
        gp_hyper_steps=int(gp.get("hyper_steps", 0)),
    )


def prepare_learned_bundle(cfg, bundle):
    """Swap in the learnable drift class and PCA-initialized outputs."""
    lrn = cfg["learning"]
    drift_class = lrn.get("drift_class", "same-as-model")
    dim = bundle.dim
    seed = int(cfg.get("seed", 0))
    rng = np.random.default_rng([seed, 303])
    inducing = None
    if drift_class == "polynomial":
        degree = int(lrn.get("drift_degree", 3))
        k = len(monomial_exponents(dim, degree))
        scale = float(lrn.get("drift_init_scale", 0.1))
        bundle.drift = PolynomialDrift(
            weights=scale * rng.standard_normal((dim, k)), degree=degree)
    elif drift_class == "linear":
        bundle.drift = LinearDrift(
            A=0.1 * rng.standard_normal((dim, dim)), b=np.zeros(dim))
    elif drift_class == "gp":
        gp = lrn.get("gp", {})
        kernel = RBFKernel(
            lengthscale=float(gp.get("lengthscale", 1.0)),
            outputscale=float(gp.get("outputscale", 1.0)),
        )
        inducing = InducingPoints.grid(
            kernel,
            float(gp.get("inducing_lo", -6.0)),
            float(gp.get("inducing_hi", 6.0)),
            int(gp.get("inducing_per_dim", 12)),
            dim,
        )
        bundle.drift = GPDrift(
            inducing=inducing,
            post=InducingPosterior.prior(inducing, dim),
        )
    elif drift_class != "same-as-model":
        raise ConfigError(f"unknown learned drift class: {drift_class}")
    if lrn.get("learn_output", True) and bundle.observation.kind == "gaussian":
        # PCA initialization of C, d from the observed rows, with the frame
        # oriented and scaled against the initial-state anchor: every trial
        # starts near nu (tight V), which is the one latent-space landmark
        # the raw principal directions know nothing about.  Without it the
        # fit can settle in a rotated/reflected latent basis.
        idx = np.nonzero(bundle.grid.obs_mask)[0]
        yobs = bundle.y[:, idx, :].reshape(-1, bundle.y.shape[-1])
        ybar = yobs.mean(axis=0)
        yc = yobs - ybar
        _, _, vt = np.linalg.svd(yc, full_matrices=False)
        C = vt[:dim].T
        x0_est = (bundle.y[:, idx[0], :] - ybar) @ C  # (trials, dim)
        C = _orient_against_anchor(C, x0_est.mean(axis=0),
                                   bundle.initial.nu)
        learn_r = bool(lrn.get("learn_r", False))
        r_init = (np.maximum(yc.var(axis=0) * 0.5, 1e-3) if learn_r
                  else bundle.observation.R_diag)
        bundle.observation = GaussianObservation(C=C, d=ybar, R_diag=r_init)
    return bundle, inducing


def _signed_permutations(dim):
    import itertools

    for perm in itertools.permutations(range(dim)):
        base = np.zeros((dim, dim))
        for row, col in enumerate(perm):
            base[row, col] = 1.0
        for signs in itertools.product((1.0, -1.0), repeat=dim):
            yield base * np.asarray(signs)[:, None]


def _orient_against_anchor(C, x0_est, nu, max_dim=3):
    """Pick the signed axis permutation R and scale s for which s R x0_est
    best matches nu, and fold them into C (new latents = s R old)."""
    dim = C.shape[1]
    if dim > max_dim or np.linalg.norm(x0_est) < 1e-9 \
            or np.linalg.norm(nu) < 1e-9:
        return C
    best = (np.inf, np.eye(dim), 1.0)
    for R in _signed_permutations(dim):
        v = R @ x0_est
        s = float(v @ nu) / float(v @ v)
        if s <= 0:
            continue
        err = float(np.sum((s * v - nu) ** 2))
        if err < best[0]:
            best = (err, R, s)
    _, R, s = best
    return (C @ R.T) / s


# ---------------------------------------------------------------------------
# run dispatch and metrics
# ---------------------------------------------------------------------------


def run_fit(cfg, dataset, out_dir=None, log_path=None):
    """Dispatch to the configured inference/learning routine.

    Returns (result dict, diagnostics list).  Diagnostics are appended to
    ``log_path`` as JSON lines while running when provided.
    """
    bundle = build_bundle(cfg, dataset)
    method = cfg.get("inference", {}).get("method", "sing")
    sing_cfg = build_sing_config(cfg)
    logger = (lambda rec: append_jsonl(log_path, rec)) if log_path else (lambda rec: None)
    vem_cfg = build_vem_config(cfg)
    if vem_cfg is not None and method == "kalman":
        raise ConfigError("learning requires sing or vdp inference")
    if method == "kalman":
        mu, log_ev = kalman_smooth(bundle)
        diag = [{
            "iteration": 1, "log_evidence": log_ev,
            "rmse": latents_rmse(mu, bundle.true_latents)
            if bundle.true_latents is not None else None,
        }]
        logger(diag[0])
        return {"kind": "kalman", "mu": mu, "bundle": bundle,
                "log_evidence": log_ev}, diag
    if method == "vdp":
        omega = float(cfg.get("inference", {}).get("omega", 0.01))
        if vem_cfg is not None:
            result = vem_fit_vdp(cfg, bundle, sing_cfg, vem_cfg, omega,
                                 logger=logger)
            return result
        state, diag = vdp_fit(bundle, sing_cfg, sing_cfg.iterations, omega)
        for rec in diag:
            logger(rec)
        return {"kind": "vdp", "state": state, "mu": vdp_marginals(state),
                "bundle": bundle}, diag
    if method != "sing":
        raise ConfigError(f"unknown inference method: {method}")
    if vem_cfg is None:
        state, diag = fit(bundle, sing_cfg,
                          callback=lambda s, rec: logger(rec))
        return {"kind": "sing", "state": state, "mu": state.mu,
                "bundle": bundle}, diag
    bundle, inducing = prepare_learned_bundle(cfg, bundle)
    result = vem_fit(bundle, sing_cfg, vem_cfg, inducing=inducing,
                     callback=lambda o, b, s, rec: logger(rec))
    return {
        "kind": "sing-vem", "state": result.state, "mu": result.state.mu,
        "bundle": result.bundle, "gp_post": result.gp_post,
        "gp_kernel": result.gp_kernel, "vem": result,
    }, result.diagnostics


def vem_fit_vdp(cfg, bundle, sing_cfg, vem_cfg, omega, logger=None):
    """Variational EM with VDP sweeps as the E-step (comparison arm)."""
    from .baselines import vdp_init, vdp_sweep, vdp_forward, vdp_elbo
    from .learning import PolyDriftObjective, _as_poly_view, AdamState, update_output_params

    bundle, inducing = prepare_learned_bundle(cfg, bundle)
    if inducing is not None:
        raise ConfigError("the VDP learning arm supports parametric drifts")
    state = vdp_init(bundle)
    adam = AdamState(lr=vem_cfg.drift_lr)
    diagnostics = []
    for outer in range(vem_cfg.outer_iters):
        state.iteration = outer
        rng = np.random.default_rng([sing_cfg.seed, outer])
        for _ in range(vem_cfg.e_steps_per_iter):
            vdp_sweep(state, bundle, sing_cfg, omega, rng=rng)
        vdp_forward(state, bundle)
        mu = vdp_marginals(state)
        if vem_cfg.learn_output and bundle.observation.kind == "gaussian":
            C, dvec, r = update_output_params(mu, bundle.y,
                                              bundle.grid.obs_mask)
            if not vem_cfg.learn_r:
                r = bundle.observation.R_diag
            bundle.observation = GaussianObservation(C=C, d=dvec, R_diag=r)
        if vem_cfg.learn_drift:
            poly, rebuild = _as_poly_view(bundle.drift)
            obj = PolyDriftObjective(poly, mu, bundle.diffusion,
                                     bundle.grid.deltas,
                                     sing_cfg.expectation, rng=rng)
            W = poly.weights
            for _ in range(vem_cfg.m_steps_per_iter):
                W = adam.step(W, obj.gradient(W))
            bundle.drift = rebuild(W)
        record = {"outer": outer + 1,
                  "elbo": vdp_elbo(state, bundle, sing_cfg, rng=rng)}
        if bundle.true_latents is not None:
            record["rmse"] = latents_rmse(mu, bundle.true_latents)
        diagnostics.append(record)
        if logger:
            logger(record)
    return {
        "kind": "vdp-vem", "state": state, "mu": vdp_marginals(state),
        "bundle": bundle,
    }, diagnostics


def compute_metrics(cfg, result, dataset):
    """Named metric values for cmd_eval; requires synthetic ground truth for
    latents/dynamics RMSE."""
    wanted = cfg.get("metrics", ["latents_rmse"])
    bundle = result["bundle"]
    mu = result["mu"]
    out = {}
    truth = dataset.latents
    for name in wanted:
        if name == "latents_rmse":
            if truth is None:
                raise ConfigError("latents_rmse needs synthetic ground truth")
            out["latents_rmse"] = latents_rmse(mu, truth)
        elif name == "dynamics_rmse":
            gen_bundle = build_bundle(dataset.config, dataset)
            out["dynamics_rmse"] = dynamics_rmse(
                gen_bundle.drift, bundle.drift, truth)
        elif name == "forward_r2":
            out["forward_r2"] = forward_sim_r2(bundle, mu)
        else:
            raise ConfigError(f"unknown metric: {name}")
    return out


def forward_sim_r2(bundle, mu, horizons=None, n_starts=10,
                   target="observations"):
    """Predictive R^2 from forward-simulating the posterior-mean drift.

    From ``n_starts`` anchor indices, the latent mean is rolled forward with
    the deterministic drift for each horizon (in grid steps); predictions are
    mapped through the observation model and compared against observations
    (or the model's own reconstructions, for which horizon 0 gives exactly 1).
    """
    grid = bundle.grid
    n = grid.num_steps + 1
    if horizons is None:
        horizons = [0, max(1, n // 20), max(2, n // 10)]
    obs = bundle.observation
    if obs.kind != "gaussian":
        raise ConfigError("forward_r2 is defined for Gaussian observations")
    starts = np.linspace(0, n - 1 - max(horizons), n_starts).astype(int)
    y = bundle.y
    ybar = y[:, grid.obs_mask].reshape(-1, y.shape[-1]).mean(axis=0)
    out = {}
    for s in horizons:
        x = mu.m[:, starts, :].copy()
        for k in range(s):
            dts = grid.deltas[np.minimum(starts + k, n - 2)]
            x = x + dts[None, :, None] * bundle.drift.value(x)
        yhat = x @ obs.C.T + obs.d
        if target == "observations":
            ytgt = y[:, starts + s, :]
        else:
            ytgt = mu.m[:, starts + s, :] @ obs.C.T + obs.d
        num = np.sum((yhat - ytgt) ** 2)
        den = np.sum((ytgt - ybar) ** 2)
        out[int(s)] = float(1.0 - num / den) if den > 0 else float("nan")
    return out


# ---------------------------------------------------------------------------
# fitted-model archive
# ---------------------------------------------------------------------------


def save_archive(out_dir, cfg, result):
    os.makedirs(out_dir, exist_ok=True)
    bundle = result["bundle"]
    learned = result["kind"].endswith("vem")
    manifest = {
        "version": 1,
        "kind": result["kind"],
        "learned": learned,
        "drift_kind": bundle.drift.kind,
        "drift_degree": getattr(bundle.drift, "degree", None),
        "observation_kind": bundle.observation.kind,
        "files": {"posterior": "posterior.npz", "params": "params.npz"},
        "config": cfg,
    }
    mu = result["mu"]
    np.savez(os.path.join(out_dir, "posterior.npz"),
             m=mu.m, mu2=mu.mu2, mu3=mu.mu3)
    blobs = {}
    obs = bundle.observation
    drift = bundle.drift
    if learned and obs.kind == "gaussian":
        blobs.update(C=obs.C, d=obs.d, R_diag=obs.R_diag)
    if learned and drift.kind in ("linear", "polynomial"):
        blobs["drift_theta"] = drift.params
    if learned and drift.kind == "gp_posterior":
        blobs.update(
            gp_Z=drift.inducing.Z, gp_m_u=drift.post.m_u,
            gp_S_u=drift.post.S_u,
            gp_hypers=np.array([drift.inducing.kernel.lengthscale,
                                drift.inducing.kernel.outputscale]),
        )
    if bundle.input_offsets is not None:
        blobs["input_offsets"] = np.asarray(bundle.input_offsets)
    np.savez(os.path.join(out_dir, "params.npz"), **blobs)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_archive(in_dir, dataset):
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = manifest["config"]
    bundle = build_bundle(cfg, dataset)
    with np.load(os.path.join(in_dir, "posterior.npz")) as post:
        mu = MeanParams(m=post["m"], mu2=post["mu2"], mu3=post["mu3"])
    with np.load(os.path.join(in_dir, "params.npz")) as blobs:
        if "C" in blobs:
            bundle.observation = GaussianObservation(
                C=blobs["C"], d=blobs["d"], R_diag=blobs["R_diag"])
        if "drift_theta" in blobs:
            theta = blobs["drift_theta"]
            dim = bundle.dim
            if manifest["drift_kind"] == "polynomial":
                degree = int(manifest.get("drift_degree") or 3)
                k = len(monomial_exponents(dim, degree))
                bundle.drift = PolynomialDrift(
                    weights=theta.reshape(dim, k), degree=degree)
            else:
                bundle.drift = LinearDrift(
                    A=theta[:dim * dim].reshape(dim, dim),
                    b=theta[dim * dim:])
        if "gp_Z" in blobs:
            hyp = blobs["gp_hypers"]
            kernel = RBFKernel(lengthscale=float(hyp[0]),
                               outputscale=float(hyp[1]))
            inducing = InducingPoints(Z=blobs["gp_Z"], kernel=kernel)
            post_u = InducingPosterior(m_u=blobs["gp_m_u"],
                                       S_u=blobs["gp_S_u"])
            bundle.drift = GPDrift(inducing=inducing, post=post_u)
    return {"kind": manifest["kind"], "mu": mu, "bundle": bundle,
            "manifest": manifest}
