"""Server side of the federation: bootstrap, client weighting, aggregation.

Schemes
-------
``fedavg``      uniform average of client models
``fedavg_n``    average weighted by each client's share of the nodes
``fedprox``     ``fedavg`` aggregation, proximal term in local training
``entente_ub``  ``(1/K) * sum_k r_k * w_k`` with adaptive weights, unbounded
``entente``     ``w + (1/K) * sum_k r_k * clip(w_k - w, M)``
``entente_dp``  ``entente`` plus Gaussian noise of std ``M_qs * sigma``

Adaptive weights are ``r_k = c1 * s_jac_k + c2 * S_k * D_k`` where ``s_jac``
compares the client's WL sketch with a shared Barabási-Albert reference
graph, ``S`` is the absolute cosine similarity and ``D`` the ``omega``-capped
L2 distance between the client model and the model it started from.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .adversary import AttackConfig, scale_update
from .graph import WLHistogram, ba_generate, jaccard_similarity, wl_histogram
from .model import (
    ClientSequence,
    ModelDims,
    ModelParams,
    NumericOverflowError,
    Proximal,
    TrainBatch,
    batch_loss,
    init_params,
    local_train,
)

logger = logging.getLogger(__name__)

SCHEMES = ("fedavg", "fedavg_n", "fedprox", "entente_ub", "entente", "entente_dp")
ACS_SCHEMES = ("entente_ub", "entente", "entente_dp")

# seed namespaces
_NS_REFERENCE, _NS_TRAIN, _NS_DP = 11, 13, 17


class FederationDiverged(RuntimeError):
    """Raised when the global model stops being finite."""


@dataclass(frozen=True)
class FederationConfig:
    K: int = 4
    R: int = 30
    E: int = 1
    eta: float = 0.01
    c1: float = 0.8
    c2: float = 0.2
    omega: float = 5.0
    M: float = 5.0
    m_ba: int = 5
    scheme: str = "entente"
    dp_sigma: float | None = None
    dp_mqs: float | None = None
    mu: float = 0.05
    early_stop_tol: float = 1e-4
    patience: int = 3
    early_stopping: bool = True
    wl_iters: int = 3
    step_unit: str = "snapshot"
    workers: int = 1
    seed: int = 0
    dp_seed: int | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("c1 and c2 must be non-negative")
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        if self.M <= 0:
            raise ValueError("M must be positive")
        if self.R < 1 or self.E < 1:
            raise ValueError("R and E must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def r_max(self) -> float:
        """Upper bound on any adaptive client weight."""
        return self.c1 + self.c2 * self.omega

    @property
    def noise_std(self) -> float:
        sigma = 1.0 if self.dp_sigma is None else self.dp_sigma
        mqs = self.M if self.dp_mqs is None else self.dp_mqs
        return mqs * sigma


@dataclass
class ClientWeights:
    s_jac: float
    s_i: float = 0.0
    d_i: float = 0.0
    r_i: float = 0.0


@dataclass
class FederationState:
    global_params: ModelParams
    iteration: int = 0
    weights: dict[int, ClientWeights] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    aborted: bool = False
    diagnosis: str | None = None


@dataclass
class ClientData:
    """What one silo brings to the federation.

    ``train`` yields batches over the training snapshots, ``val`` (optional)
    is a fixed batch scored with the global model for early stopping, and
    ``n_nodes`` counts the nodes the client owns.
    """

    k: int
    train: ClientSequence
    sketch: WLHistogram
    n_nodes: int
    val: TrainBatch | None = None


def bootstrap(cfg: FederationConfig, total_nodes: int, client_sketches: Sequence[WLHistogram]) -> list[float]:
    """Jaccard similarity of every client sketch to the shared reference graph."""
    if total_nodes <= cfg.m_ba:
        raise ValueError(f"total_nodes={total_nodes} must exceed m_ba={cfg.m_ba}")
    ref_seed = int(np.random.SeedSequence([cfg.seed, _NS_REFERENCE]).generate_state(1)[0])
    reference = ba_generate(total_nodes, cfg.m_ba, ref_seed)
    ref_hist = wl_histogram(reference, cfg.wl_iters)
    return [jaccard_similarity(h, ref_hist) for h in client_sketches]


def acs(w_prev: ModelParams | np.ndarray, w_k: ModelParams | np.ndarray, omega: float) -> tuple[float, float]:
    """Absolute cosine similarity and ``omega``-capped L2 distance."""
    a = np.asarray(getattr(w_prev, "flat", w_prev), dtype=np.float64)
    b = np.asarray(getattr(w_k, "flat", w_k), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"parameter layouts differ: {a.shape} vs {b.shape}")
    sa, sb = (float(np.abs(v).max(initial=0.0)) for v in (a, b))
    if sa == 0 or sb == 0:
        S = 0.0
    else:
        # rescale first so huge (scaled-up) submissions do not overflow the dot product
        an, bn = a / sa, b / sb
        S = float(min(1.0, abs(an @ bn) / (np.linalg.norm(an) * np.linalg.norm(bn))))
    with np.errstate(over="ignore"):
        D = float(min(np.linalg.norm(b - a), omega))
    return S, D


def norm_bound(delta: np.ndarray, M: float) -> np.ndarray:
    """``delta / max(1, ||delta|| / M)``."""
    if M <= 0:
        raise ValueError("M must be positive")
    delta = np.asarray(delta, dtype=np.float64)
    return delta / max(1.0, float(np.linalg.norm(delta)) / M)


def _dp_rng(cfg: FederationConfig, iteration: int) -> np.random.Generator:
    base = [cfg.seed, _NS_DP] if cfg.dp_seed is None else [cfg.dp_seed]
    return np.random.default_rng(np.random.SeedSequence([*base, iteration]))


def _combine(cfg: FederationConfig, iteration: int, w_prev: np.ndarray, subs: Sequence[np.ndarray], rs: Sequence[float]) -> np.ndarray:
    if cfg.scheme not in ("entente", "entente_dp"):
        flat = np.zeros_like(w_prev)
        for r, wk in zip(rs, subs):
            flat += r * wk
        return flat / len(subs) if cfg.scheme == "entente_ub" else flat
    step = np.zeros_like(w_prev)
    for r, wk in zip(rs, subs):
        step += r * norm_bound(wk - w_prev, cfg.M)
    flat = w_prev + step / len(subs)
    if cfg.scheme == "entente_dp":
        flat = flat + _dp_rng(cfg, iteration).normal(0.0, cfg.noise_std, flat.shape)
    return flat


def aggregate(
    cfg: FederationConfig,
    state: FederationState,
    client_params: Sequence[ModelParams],
    client_meta: Sequence[tuple[float, int]],
) -> ModelParams:
    """Fold the ``K`` client submissions into the next global model.

    ``client_meta[k]`` is ``(s_jac, node_count)``.  Clients are processed in
    index order.  ``state.weights`` is updated with this round's weights.
    """
    K = len(client_params)
    if K == 0 or K != len(client_meta):
        raise ValueError("need one (s_jac, node_count) entry per client submission")
    w_prev = state.global_params
    for k, wk in enumerate(client_params, start=1):
        if len(wk) != len(w_prev):
            raise ValueError(f"client {k} parameter layout differs from the global model")
        if not wk.is_finite():
            state.aborted = True
            state.diagnosis = f"NaN: client {k} submitted non-finite parameters at iteration {state.iteration}"
            raise FederationDiverged(state.diagnosis)

    total_nodes = sum(n for _, n in client_meta)
    rs = []
    for k, (wk, (s_jac, n_k)) in enumerate(zip(client_params, client_meta), start=1):
        S, D = acs(w_prev, wk, cfg.omega)
        if cfg.scheme in ACS_SCHEMES:
            r = cfg.c1 * s_jac + cfg.c2 * S * D
        elif cfg.scheme == "fedavg_n":
            r = n_k / total_nodes
        else:
            r = 1.0 / K
        rs.append(r)
        state.weights[k] = ClientWeights(float(s_jac), S, D, float(r))

    with np.errstate(over="ignore", invalid="ignore"):
        flat = _combine(cfg, state.iteration, w_prev.flat, [wk.flat for wk in client_params], rs)
    new = w_prev.replace(flat)
    if not new.is_finite():
        state.aborted = True
        state.diagnosis = f"NaN: global model became non-finite at iteration {state.iteration}"
        raise FederationDiverged(state.diagnosis)
    return new


def early_stop(history: Sequence[dict], tol: float = 1e-4, patience: int = 3) -> bool:
    """Stop after ``patience`` consecutive small relative changes, or after
    ``patience`` rounds without a new best validation loss."""
    if patience < 1:
        return False
    tail = history[-patience:]
    if len(tail) == patience and all(
        h.get("rel_change") is not None and h["rel_change"] < tol for h in tail
    ):
        return True
    losses = [h.get("val_loss") for h in history]
    if len(losses) > patience and all(v is not None for v in losses):
        best_before = min(losses[:-patience])
        if min(losses[-patience:]) >= best_before:
            return True
    return False


def _client_seed(cfg: FederationConfig, iteration: int, k: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, _NS_TRAIN, iteration, k]).generate_state(1)[0])


def _train_client(cfg: FederationConfig, w: ModelParams, client: ClientData, iteration: int, gamma: float):
    prox = Proximal(cfg.mu, w.flat.copy()) if cfg.scheme == "fedprox" else None
    wk = local_train(
        w,
        client.train,
        cfg.E,
        cfg.eta,
        prox,
        _client_seed(cfg, iteration, client.k),
        step_unit=cfg.step_unit,
    )
    if gamma != 1.0:
        wk = scale_update(wk, gamma)
    return wk


def _val_loss(w: ModelParams, clients: Sequence[ClientData]) -> float | None:
    batches = [c.val for c in clients if c.val is not None]
    if not batches:
        return None
    return float(np.mean([batch_loss(w, b) for b in batches]))


def run_federation(
    cfg: FederationConfig,
    clients: Sequence[ClientData],
    dims: ModelDims,
    *,
    total_nodes: int | None = None,
    attack: AttackConfig | None = None,
    init: ModelParams | None = None,
) -> tuple[ModelParams, FederationState, list[dict]]:
    """Train a global model over ``clients`` for up to ``cfg.R`` rounds.

    Returns the final global parameters, the server state and the
    per-round client weight log (rows of ``iteration, client, r, s_jac, s, d``).
    On divergence the state is marked ``aborted`` with a ``NaN`` diagnosis and
    the last finite global model is returned.
    """
    if len(clients) != cfg.K:
        raise ValueError(f"config says K={cfg.K} but {len(clients)} clients were given")
    if attack is not None:
        attack.validate(cfg.K)
    total_nodes = total_nodes if total_nodes is not None else sum(c.n_nodes for c in clients)
    s_jac = bootstrap(cfg, total_nodes, [c.sketch for c in clients])
    meta = [(s, c.n_nodes) for s, c in zip(s_jac, clients)]

    w = init if init is not None else init_params(dims, cfg.seed)
    state = FederationState(w, 0, {c.k: ClientWeights(s, r_i=s) for c, s in zip(clients, s_jac)})
    weight_log: list[dict] = []
    gammas = [
        attack.gamma if attack is not None and c.k in attack.malicious_clients else 1.0 for c in clients
    ]

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for i in range(1, cfg.R + 1):
            state.iteration = i
            try:
                futures = [pool.submit(_train_client, cfg, w, c, i, g) for c, g in zip(clients, gammas)]
                submitted = [f.result() for f in futures]
                new = aggregate(cfg, state, submitted, meta)
            except (FederationDiverged, NumericOverflowError, FloatingPointError) as exc:
                state.aborted = True
                if not (state.diagnosis or "").startswith("NaN"):
                    state.diagnosis = f"NaN: training diverged at iteration {i} ({exc})"
                logger.warning(state.diagnosis)
                break

            for k, cw in sorted(state.weights.items()):
                weight_log.append({"iteration": i, "client": k, "r": cw.r_i, "s_jac": cw.s_jac, "s": cw.s_i, "d": cw.d_i})

            delta = new.flat - w.flat
            norm_w = float(np.linalg.norm(w.flat))
            record = {
                "iteration": i,
                "delta_norm": float(np.linalg.norm(delta)),
                "rel_change": float(np.linalg.norm(delta) / norm_w) if norm_w else None,
                "global_norm": float(np.linalg.norm(new.flat)),
            }
            if cfg.scheme == "entente":
                record["bound_ok"] = bool(np.linalg.norm(delta) <= cfg.r_max * cfg.M * (1 + 1e-12))
            elif cfg.scheme == "entente_ub":
                l1 = cfg.r_max * np.mean([np.abs(p.flat).sum() for p in submitted])
                record["bound_ok"] = bool(np.abs(new.flat).sum() <= l1 * (1 + 1e-12))
            try:
                record["val_loss"] = _val_loss(new, clients)
            except (NumericOverflowError, FloatingPointError):
                record["val_loss"] = None
            state.history.append(record)
            w = new
            state.global_params = w
            if cfg.early_stopping and early_stop(state.history, cfg.early_stop_tol, cfg.patience):
                logger.info("early stop at iteration %d", i)
                break

    return w, state, weight_log


def config_dict(cfg: FederationConfig) -> dict:
    return asdict(cfg)


def with_scheme(cfg: FederationConfig, scheme: str) -> FederationConfig:
    return replace(cfg, scheme=scheme)
