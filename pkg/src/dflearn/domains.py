"""Synthetic instance generators and file loaders for the three benchmark domains.

Each instance pairs a feature matrix (one row per predicted unit) with a
target parameter matrix.  The original datasets are not redistributable, so
the generators mirror their documented statistics; externally prepared data
can be loaded from the plain-text format below.

File format (whitespace-separated decimals, LF endings)::

    <domain> <rows> <cols> <k>
    <rows lines of cols target values>
    <rows lines of feature values>

For the matching domain the target block is one column (edge labels in
row-major edge order) and ``k`` stores the side size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qp import QpProblem

__all__ = [
    "DatasetInstance",
    "ParseError",
    "RangeError",
    "DOMAINS",
    "gen_budget_allocation",
    "gen_bipartite_matching",
    "gen_diverse_recommendation",
    "matching_to_qp",
    "matching_targets",
    "save_instance",
    "load_instance",
    "validate_instance",
]

DOMAINS = ("budget", "matching", "recommendation")


class ParseError(ValueError):
    """Malformed instance file; the message carries the offending line."""


class RangeError(ValueError):
    """Targets violate the domain's parameter range."""


@dataclass
class DatasetInstance:
    """One (features, targets) pair plus the decision problem's metadata.

    For budget and recommendation, ``k`` is the default selection budget; for
    matching it is the side size s (targets then have s*s rows, one column).
    """

    domain: str
    features: np.ndarray
    targets: np.ndarray
    k: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("features and targets must be 2-d matrices")
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("feature and target row counts must agree")
        if self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")


def matching_targets(inst: DatasetInstance):
    """Reshape a matching instance's edge-label column into the s x s matrix."""
    s = inst.k
    return inst.targets.reshape(s, s)


def gen_budget_allocation(seed, channels, customers, density=0.05, instances=1,
                          k=5, net_layers=5):
    """Budget-allocation instances: sparse channel-customer reach probabilities.

    Present edges get a probability uniform in [0, 0.2]; the support is
    Bernoulli(density).  The feature row for a channel is its probability row
    pushed through a fixed random ``net_layers``-layer rectifier network whose
    weights are drawn once per dataset from the seed (hidden width equals the
    row length).
    """
    if channels < 1 or customers < 1:
        raise ValueError("channels and customers must be >= 1")
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    rng = _rng(seed)
    mats = [
        rng.normal(0.0, np.sqrt(2.0 / customers), size=(customers, customers))
        for _ in range(net_layers)
    ]

    def feature_net(theta, scale=1.0):
        h = theta
        for W in mats[:-1]:
            h = np.maximum(h @ W, 0.0)
        return scale * (h @ mats[-1])

    # calibrate the feature scale once per dataset so features are O(1);
    # the probe rows follow the same distribution as the targets
    probe = (rng.random((256, customers)) < density) * rng.uniform(
        0.0, 0.2, size=(256, customers)
    )
    probe_std = float(feature_net(probe).std())
    scale = 1.0 / probe_std if probe_std > 0 else 1.0

    out = []
    for _ in range(instances):
        mask = rng.random((channels, customers)) < density
        theta = mask * rng.uniform(0.0, 0.2, size=(channels, customers))
        out.append(
            DatasetInstance(
                domain="budget",
                features=feature_net(theta, scale),
                targets=theta,
                k=k,
            )
        )
    return out


def gen_bipartite_matching(seed, side_size, feature_dim=8, communities=2,
                           instances=1, p_in=0.5, p_out=0.05, affinity=0.3,
                           noise=0.3, activity=0.0):
    """Degree-corrected planted-community bipartite graphs.

    Nodes carry a latent vector aligned with their community and (optionally)
    a hub activity level; an edge (u, v) appears with probability
    ``clip(a_u a_v p_base + affinity * cos(z_u, z_v), 0, 1)`` where p_base is
    p_in or p_out depending on community agreement and a ~ exp(-activity * E)
    for standard-exponential E (activity = 0 turns hubs off).  Observed node
    features are the activity-scaled latents plus Gaussian noise, so hub
    structure shows up only through feature magnitudes; an edge's feature is
    the concatenation of its endpoints' features.
    """
    if side_size < 1 or feature_dim < 1 or communities < 1:
        raise ValueError("sizes must be >= 1")
    if feature_dim < communities:
        raise ValueError("feature_dim must be >= communities")
    rng = _rng(seed)
    s = side_size
    out = []
    for _ in range(instances):
        comm_l = rng.integers(communities, size=s)
        comm_r = rng.integers(communities, size=s)
        z_l = rng.normal(0.0, 1.0, size=(s, feature_dim))
        z_r = rng.normal(0.0, 1.0, size=(s, feature_dim))
        z_l[np.arange(s), comm_l] += 2.0
        z_r[np.arange(s), comm_r] += 2.0
        a_l = np.exp(-activity * rng.exponential(size=s))
        a_r = np.exp(-activity * rng.exponential(size=s))
        zl_n = z_l / np.linalg.norm(z_l, axis=1, keepdims=True)
        zr_n = z_r / np.linalg.norm(z_r, axis=1, keepdims=True)
        base = np.where(comm_l[:, None] == comm_r[None, :], p_in, p_out)
        prob = np.clip(
            np.outer(a_l, a_r) * base + affinity * (zl_n @ zr_n.T), 0.0, 1.0
        )
        adj = (rng.random((s, s)) < prob).astype(float)
        feat_l = a_l[:, None] * z_l + rng.normal(0.0, noise, size=z_l.shape)
        feat_r = a_r[:, None] * z_r + rng.normal(0.0, noise, size=z_r.shape)
        edge_feat = np.hstack(
            [np.repeat(feat_l, s, axis=0), np.tile(feat_r, (s, 1))]
        )
        out.append(
            DatasetInstance(
                domain="matching",
                features=edge_feat,
                targets=adj.reshape(s * s, 1),
                k=s,
            )
        )
    return out


def gen_diverse_recommendation(seed, items, topics, users, instances=1,
                               topics_per_item=2, user_topics=2, noise=0.1,
                               missing=0.5, k=5):
    """Item-topic coverage instances with user-rating features.

    Each item covers a few topics (binary theta); each user has positive
    affinities for a few topics and rates items by affinity-weighted topic
    membership plus noise, with ratings zeroed at random to mimic missing
    data.  With users == topics and user_topics == 1 every user likes exactly
    their own topic, so noise-free features linearly separate membership.
    """
    if items < 1 or topics < 1 or users < 1:
        raise ValueError("sizes must be >= 1")
    rng = _rng(seed)
    out = []
    for _ in range(instances):
        theta = np.zeros((items, topics))
        for i in range(items):
            count = min(topics, 1 + rng.poisson(max(topics_per_item - 1, 0)))
            theta[i, rng.choice(topics, size=count, replace=False)] = 1.0
        affinity = np.zeros((users, topics))
        if users == topics and user_topics == 1:
            liked = np.arange(users)[:, None]
        else:
            liked = np.stack(
                [rng.choice(topics, size=min(user_topics, topics), replace=False)
                 for _ in range(users)]
            )
        for u in range(users):
            affinity[u, liked[u]] = rng.uniform(0.5, 1.5, size=liked[u].size)
        ratings = theta @ affinity.T + rng.normal(0.0, noise, size=(items, users))
        if missing > 0:
            ratings *= rng.random((items, users)) >= missing
        out.append(
            DatasetInstance(
                domain="recommendation", features=ratings, targets=theta, k=k
            )
        )
    return out


def matching_to_qp(weights, gamma) -> QpProblem:
    """Encode s x s bipartite matching as a regularized LP.

    Variables x_ij (row-major); 2s degree rows (row and column sums <= 1)
    followed by 2 s^2 box rows (x <= 1, -x <= 0).
    """
    W = np.asarray(weights, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("matching weights must form a square matrix")
    s = W.shape[0]
    n = s * s
    degree = np.zeros((2 * s, n))
    for i in range(s):
        degree[i, i * s : (i + 1) * s] = 1.0  # row i's edges
    for j in range(s):
        degree[s + j, j::s] = 1.0  # column j's edges
    G = np.vstack([degree, np.eye(n), -np.eye(n)])
    h = np.concatenate([np.ones(2 * s), np.ones(n), np.zeros(n)])
    return QpProblem(
        theta=W.ravel(),
        A=np.zeros((0, n)),
        b=np.zeros(0),
        G=G,
        h=h,
        gamma=gamma,
    )


def validate_instance(inst: DatasetInstance):
    """Domain-specific target range checks; raises RangeError on violation."""
    t = inst.targets
    if inst.domain == "budget":
        if np.any(t < 0.0) or np.any(t > 0.2):
            raise RangeError("budget targets must lie in [0, 0.2]")
    else:
        if not np.all((t == 0.0) | (t == 1.0)):
            raise RangeError(f"{inst.domain} targets must be binary")
    if inst.domain == "matching":
        s = inst.k
        if t.shape != (s * s, 1):
            raise RangeError("matching targets must be one edge-label column of s^2 rows")
    return inst


def save_instance(inst: DatasetInstance, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        rows, cols = inst.targets.shape
        f.write(f"{inst.domain} {rows} {cols} {inst.k}\n")
        for row in inst.targets:
            f.write(" ".join(format(float(v), ".17g") for v in row) + "\n")
        for row in inst.features:
            f.write(" ".join(format(float(v), ".17g") for v in row) + "\n")


def load_instance(path, domain=None) -> DatasetInstance:
    """Parse and validate an instance file; ParseError carries line numbers."""
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError("line 1: empty instance file")
    header = lines[0].split()
    if len(header) != 4:
        raise ParseError("line 1: header must be '<domain> <rows> <cols> <k>'")
    dom = header[0]
    if dom not in DOMAINS:
        raise ParseError(f"line 1: unknown domain {dom!r}")
    if domain is not None and dom != domain:
        raise ParseError(f"line 1: expected domain {domain!r}, found {dom!r}")
    try:
        rows, cols, k = int(header[1]), int(header[2]), int(header[3])
    except ValueError as exc:
        raise ParseError(f"line 1: non-integer header field ({exc})") from exc
    if len(lines) < 1 + 2 * rows:
        raise ParseError(
            f"line {len(lines)}: truncated file, expected {1 + 2 * rows} lines or more"
        )
    targets = _parse_block(lines, 1, rows, cols)
    feat_width = len(lines[1 + rows].split())
    features = _parse_block(lines, 1 + rows, rows, feat_width)
    inst = DatasetInstance(domain=dom, features=features, targets=targets, k=k)
    return validate_instance(inst)


def _parse_block(lines, start, rows, cols):
    out = np.empty((rows, cols))
    for r in range(rows):
        lineno = start + r + 1
        parts = lines[start + r].split()
        if len(parts) != cols:
            raise ParseError(
                f"line {lineno}: expected {cols} values, found {len(parts)}"
            )
        try:
            out[r] = [float(t) for t in parts]
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad number ({exc})") from exc
    return out


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
