"""Synthetic two-modality survival cohorts, pathway tokenization and cohort I/O.

The generator plants three independent latent factors per patient: a shared
factor that drives both gene expression and slide morphology, and one factor
specific to each modality. Gene expression mixes shared and transcriptomic
latents; slide patches are draws around per-patient prototype means whose
positions and proportions depend on shared and image latents. Survival times
are exponential with log-rate equal to a known linear function of all
latents, so learned representations can be checked against ground truth.

Cohort directory layout (all CSVs UTF-8 with a header row)::

    generator.cfg        key = value echo of the GeneratorConfig
    expression.csv       patient_id, <gene symbols...>
    survival.csv         patient_id, time, event, site, age, grade
    pathways.gmt         name <TAB> description <TAB> gene symbols...
    patches/<id>.csv     f0 .. f{D_p-1}, one row per patch
    planted.csv          patient_id, true_risk, shared_*, tx_*, img_*   (optional)
    planted_weights.npz  generator weights                          (optional)
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .config import ConfigError, build, dump_kv, read_kv

log = logging.getLogger(__name__)


class MembershipError(ValueError):
    pass


class GmtParseError(ValueError):
    pass


class CohortFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int = 500
    n_genes: int = 200
    n_pathways: int = 8
    patch_dim: int = 16
    patches_min: int = 64
    patches_max: int = 128
    n_clusters: int = 4
    shared_dim: int = 4
    tx_dim: int = 4
    img_dim: int = 4
    noise: float = 0.3
    shared_view_noise: float = 0.0
    censoring: float = 0.3
    w_shared: float = 1.5
    w_tx: float = 0.75
    w_img: float = 0.75
    center_scale: float = 1.0
    shift_scale: float = 0.5
    logit_scale: float = 0.5
    n_sites: int = 3
    clinical_signal: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 2:
            raise ConfigError("n_patients must be at least 2")
        if self.n_pathways < 2 or self.n_pathways > self.n_genes:
            raise ConfigError("need 2 <= n_pathways <= n_genes")
        if self.shared_dim + self.tx_dim > self.n_genes:
            raise ConfigError("latent dims exceed n_genes")
        if self.shared_dim + self.img_dim > self.patch_dim:
            raise ConfigError("latent dims exceed patch_dim")
        if not 1 <= self.patches_min <= self.patches_max:
            raise ConfigError("need 1 <= patches_min <= patches_max")
        if self.patches_min < self.n_clusters:
            raise ConfigError("patches_min must be at least n_clusters")
        if not 0.0 <= self.censoring < 1.0:
            raise ConfigError("censoring must be in [0, 1)")
        if self.noise < 0 or self.shared_view_noise < 0 or self.n_sites < 1:
            raise ConfigError("noise levels must be >= 0 and n_sites >= 1")
        if not 0.0 <= self.clinical_signal <= 1.0:
            raise ConfigError("clinical_signal must be in [0, 1]")


def read_generator_config(path) -> GeneratorConfig:
    return build(GeneratorConfig, read_kv(path))


@dataclass
class PathwayMembership:
    names: list[str]
    genes: list[np.ndarray]

    def __post_init__(self):
        self.genes = [np.asarray(g, dtype=np.int64) for g in self.genes]
        if len(self.names) != len(self.genes):
            raise MembershipError("one gene list per pathway name required")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.genes)

    def validate(self, n_genes: int) -> None:
        if len(self) < 2:
            raise MembershipError("at least 2 pathways required")
        for name, idx in zip(self.names, self.genes):
            if idx.size == 0:
                raise MembershipError(f"pathway {name!r} is empty")
            if idx.min() < 0 or idx.max() >= n_genes:
                raise MembershipError(f"pathway {name!r} has gene index outside [0, {n_genes})")

    def __eq__(self, other) -> bool:
        return (isinstance(other, PathwayMembership) and self.names == other.names
                and len(self.genes) == len(other.genes)
                and all(np.array_equal(a, b) for a, b in zip(self.genes, other.genes)))


def tokenize_pathways(g: np.ndarray, membership: PathwayMembership) -> list[np.ndarray]:
    """Split expression into one token per pathway, genes in membership order.

    ``g`` may be a single vector (D_g,) or a matrix (n, D_g); tokens keep the
    leading dimension.
    """
    g = np.asarray(g, dtype=np.float64)
    for name, idx in zip(membership.names, membership.genes):
        if idx.size and (idx.min() < 0 or idx.max() >= g.shape[-1]):
            raise MembershipError(f"pathway {name!r} references a gene outside [0, {g.shape[-1]})")
    return [g[..., idx] for idx in membership.genes]


def load_gene_sets(path, symbol_index: dict[str, int]) -> tuple[PathwayMembership, int]:
    """Read a GMT file and map symbols to cohort gene indices.

    Returns the membership and the number of dropped (unknown) symbols.
    """
    names, genes = [], []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) < 3 or not fields[0]:
                raise GmtParseError(f"{path}:{lineno}: expected name, description and genes")
            idx = []
            for sym in fields[2:]:
                if not sym:
                    continue
                if sym in symbol_index:
                    idx.append(symbol_index[sym])
                else:
                    dropped += 1
            if not idx:
                raise MembershipError(f"{path}:{lineno}: pathway {fields[0]!r} empty after filtering")
            names.append(fields[0])
            genes.append(idx)
    if dropped:
        log.warning("dropped %d unknown gene symbol(s) from %s", dropped, path)
    return PathwayMembership(names, genes), dropped


def write_gene_sets(path, membership: PathwayMembership, gene_names: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for name, idx in zip(membership.names, membership.genes):
            fh.write("\t".join([name, "na", *(gene_names[i] for i in idx)]) + "\n")


@dataclass
class PlantedFactors:
    shared: np.ndarray
    tx: np.ndarray
    img: np.ndarray
    true_risk: np.ndarray
    weights: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Cohort:
    ids: list[str]
    gene_names: list[str]
    expression: np.ndarray          # n x D_g
    pathways: PathwayMembership
    bags: list[np.ndarray]          # n of (N_hi x D_p)
    times: np.ndarray
    events: np.ndarray              # int 0/1
    sites: np.ndarray               # int
    clinical: np.ndarray            # n x 2 (age, grade)
    planted: PlantedFactors | None = None
    config: GeneratorConfig | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def patch_dim(self) -> int:
        return self.bags[0].shape[1]

    def subset(self, index) -> "Cohort":
        index = np.asarray(index, dtype=np.int64)
        planted = None
        if self.planted is not None:
            p = self.planted
            planted = PlantedFactors(p.shared[index], p.tx[index], p.img[index],
                                     p.true_risk[index], p.weights)
        return dataclasses.replace(
            self, ids=[self.ids[i] for i in index], expression=self.expression[index],
            bags=[self.bags[i] for i in index], times=self.times[index],
            events=self.events[index], sites=self.sites[index],
            clinical=self.clinical[index], planted=planted)


def _censor_scale(rates: np.ndarray, target: float) -> float:
    """Uniform(0, c) censoring bound giving expected censoring fraction ``target``."""
    if target <= 0:
        return np.inf

    def frac(log_c):
        x = rates * np.exp(log_c)
        return np.mean(-np.expm1(-x) / x) - target

    lo, hi = -30.0, 30.0
    return float(np.exp(brentq(frac, lo, hi, xtol=1e-12)))


def generate_cohort(cfg: GeneratorConfig, seed: int | None = None) -> Cohort:
    """Draw a planted-factor cohort; patient i uses RNG stream (seed, 1, i)."""
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    if seed != cfg.seed:
        cfg = dataclasses.replace(cfg, seed=seed)
    n, dg_, dp = cfg.n_patients, cfg.n_genes, cfg.patch_dim
    grng = np.random.default_rng([seed, 0])

    ds, dt, di = cfg.shared_dim, cfg.tx_dim, cfg.img_dim
    w = {
        "gene_shared": grng.normal(size=(ds, dg_)) / np.sqrt(ds + dt),
        "gene_tx": grng.normal(size=(dt, dg_)) / np.sqrt(ds + dt),
        "centers": grng.normal(size=(cfg.n_clusters, dp)) * cfg.center_scale,
        "shift_shared": grng.normal(size=(cfg.n_clusters, ds, dp)) / np.sqrt(ds + di),
        "shift_img": grng.normal(size=(cfg.n_clusters, di, dp)) / np.sqrt(ds + di),
        "logit_shared": grng.normal(size=(ds, cfg.n_clusters)),
        "logit_img": grng.normal(size=(di, cfg.n_clusters)),
    }
    for key, dim in (("beta_shared", ds), ("beta_tx", dt), ("beta_img", di)):
        b = grng.normal(size=dim)
        w[key] = b / np.linalg.norm(b)

    # pathways: contiguous near-equal blocks of genes
    bounds = np.linspace(0, dg_, cfg.n_pathways + 1).round().astype(int)
    gene_names = [f"G{j:04d}" for j in range(dg_)]
    membership = PathwayMembership([f"PATHWAY_{k:02d}" for k in range(cfg.n_pathways)],
                                   [np.arange(bounds[k], bounds[k + 1]) for k in range(cfg.n_pathways)])

    rngs = [np.random.default_rng([seed, 1, i]) for i in range(n)]
    shared = np.empty((n, ds))
    tx = np.empty((n, dt))
    img = np.empty((n, di))
    for i, r in enumerate(rngs):
        shared[i], tx[i], img[i] = r.normal(size=ds), r.normal(size=dt), r.normal(size=di)
    risk = (cfg.w_shared * shared @ w["beta_shared"] + cfg.w_tx * tx @ w["beta_tx"]
            + cfg.w_img * img @ w["beta_img"])

    expression = np.empty((n, dg_))
    bags = []
    t_event = np.empty(n)
    u_censor = np.empty(n)
    sites = np.empty(n, dtype=np.int64)
    clin_noise = np.empty((n, 2))
    for i, r in enumerate(rngs):
        # each modality observes the shared factor through its own view noise
        s_gene = shared[i] + cfg.shared_view_noise * r.normal(size=ds)
        s_img = shared[i] + cfg.shared_view_noise * r.normal(size=ds)
        expression[i] = (s_gene @ w["gene_shared"] + tx[i] @ w["gene_tx"]
                         + cfg.noise * r.normal(size=dg_))
        logits = cfg.logit_scale * (s_img @ w["logit_shared"] + img[i] @ w["logit_img"])
        pi = np.exp(logits - logits.max())
        pi /= pi.sum()
        means = (w["centers"] + cfg.shift_scale
                 * (np.einsum("d,kdp->kp", s_img, w["shift_shared"])
                    + np.einsum("d,kdp->kp", img[i], w["shift_img"])))
        n_patch = int(r.integers(cfg.patches_min, cfg.patches_max + 1))
        labels = r.choice(cfg.n_clusters, size=n_patch, p=pi)
        bags.append(means[labels] + cfg.noise * r.normal(size=(n_patch, dp)))
        t_event[i] = r.exponential() / np.exp(risk[i])
        u_censor[i] = r.uniform()
        sites[i] = r.integers(cfg.n_sites)
        clin_noise[i] = r.normal(size=2)

    c_max = _censor_scale(np.exp(risk), cfg.censoring)
    t_censor = u_censor * c_max if np.isfinite(c_max) else np.full(n, np.inf)
    events = (t_event <= t_censor).astype(np.int64)
    times = np.maximum(np.minimum(t_event, t_censor), 1e-12)

    rz = (risk - risk.mean()) / (risk.std() + 1e-12)
    c = cfg.clinical_signal
    age = 60.0 + 10.0 * (c * rz + np.sqrt(1 - c * c) * clin_noise[:, 0])
    grade = 1.0 + np.digitize(c * rz + np.sqrt(1 - c * c) * clin_noise[:, 1], [-0.5, 0.5])

    return Cohort(
        ids=[f"P{i:04d}" for i in range(n)], gene_names=gene_names, expression=expression,
        pathways=membership, bags=bags, times=times, events=events, sites=sites,
        clinical=np.column_stack([age, grade]),
        planted=PlantedFactors(shared, tx, img, risk, w), config=cfg)


# ---------------------------------------------------------------- file I/O


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


def write_cohort(cohort: Cohort, out_dir) -> Path:
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    if cohort.config is not None:
        (out / "generator.cfg").write_text(dump_kv(cohort.config), encoding="utf-8")
    _write_rows(out / "expression.csv", ["patient_id", *cohort.gene_names],
                ([pid, *map(_fmt, row)] for pid, row in zip(cohort.ids, cohort.expression)))
    _write_rows(out / "survival.csv", ["patient_id", "time", "event", "site", "age", "grade"],
                ([pid, _fmt(t), int(e), int(s), _fmt(c[0]), _fmt(c[1])]
                 for pid, t, e, s, c in zip(cohort.ids, cohort.times, cohort.events,
                                            cohort.sites, cohort.clinical)))
    write_gene_sets(out / "pathways.gmt", cohort.pathways, cohort.gene_names)
    dp = cohort.patch_dim
    for pid, bag in zip(cohort.ids, cohort.bags):
        _write_rows(out / "patches" / f"{pid}.csv", [f"f{j}" for j in range(dp)],
                    ([*map(_fmt, row)] for row in bag))
    if cohort.planted is not None:
        p = cohort.planted
        header = (["patient_id", "true_risk"] + [f"shared_{j}" for j in range(p.shared.shape[1])]
                  + [f"tx_{j}" for j in range(p.tx.shape[1])] + [f"img_{j}" for j in range(p.img.shape[1])])
        _write_rows(out / "planted.csv", header,
                    ([pid, _fmt(r), *map(_fmt, s), *map(_fmt, a), *map(_fmt, b)]
                     for pid, r, s, a, b in zip(cohort.ids, p.true_risk, p.shared, p.tx, p.img)))
        if p.weights:
            with open(out / "planted_weights.npz", "wb") as fh:
                np.savez(fh, **p.weights)
    return out


def _read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.exists():
        raise CohortFormatError(f"missing file {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CohortFormatError(f"{path} has no header row")
    return rows[0], rows[1:]


def read_cohort(cohort_dir) -> Cohort:
    root = Path(cohort_dir)
    header, rows = _read_table(root / "expression.csv")
    if header[0] != "patient_id":
        raise CohortFormatError("expression.csv must start with a patient_id column")
    ids = [r[0] for r in rows]
    gene_names = header[1:]
    expression = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)

    sheader, srows = _read_table(root / "survival.csv")
    want = ["patient_id", "time", "event", "site", "age", "grade"]
    if sheader != want:
        raise CohortFormatError(f"survival.csv header must be {want}, got {sheader}")
    by_id = {r[0]: r for r in srows}
    if set(by_id) != set(ids):
        raise CohortFormatError("survival.csv and expression.csv list different patients")
    srows = [by_id[pid] for pid in ids]
    times = np.array([float(r[1]) for r in srows])
    events = np.array([int(r[2]) for r in srows], dtype=np.int64)
    sites = np.array([int(r[3]) for r in srows], dtype=np.int64)
    clinical = np.array([[float(r[4]), float(r[5])] for r in srows])

    membership, _ = load_gene_sets(root / "pathways.gmt", {g: i for i, g in enumerate(gene_names)})
    bags = []
    for pid in ids:
        _, prow = _read_table(root / "patches" / f"{pid}.csv")
        bags.append(np.array([[float(v) for v in r] for r in prow], dtype=np.float64))

    planted = None
    if (root / "planted.csv").exists():
        pheader, prows = _read_table(root / "planted.csv")
        pmap = {r[0]: r for r in prows}
        arr = np.array([[float(v) for v in pmap[pid][1:]] for pid in ids])
        cols = pheader[1:]
        pick = lambda prefix: arr[:, [j for j, c in enumerate(cols) if c.startswith(prefix)]]  # noqa: E731
        weights = {}
        if (root / "planted_weights.npz").exists():
            with np.load(root / "planted_weights.npz") as z:
                weights = {k: z[k] for k in z.files}
        planted = PlantedFactors(pick("shared_"), pick("tx_"), pick("img_"), arr[:, 0], weights)

    config = read_generator_config(root / "generator.cfg") if (root / "generator.cfg").exists() else None
    return Cohort(ids, gene_names, expression, membership, bags, times, events, sites,
                  clinical, planted, config)


def validate_cohort_dir(cohort_dir) -> list[str]:
    """Schema checks on a cohort directory; returns a list of problems (empty if valid)."""
    problems = []
    try:
        cohort = read_cohort(cohort_dir)
    except (CohortFormatError, GmtParseError, MembershipError, ValueError, KeyError) as exc:
        return [str(exc)]
    n = len(cohort)
    if len(set(cohort.ids)) != n:
        problems.append("duplicate patient ids")
    if not np.all(np.isfinite(cohort.expression)):
        problems.append("non-finite expression values")
    if np.any(cohort.times <= 0) or not np.all(np.isfinite(cohort.times)):
        problems.append("survival times must be finite and > 0")
    if not np.isin(cohort.events, (0, 1)).all():
        problems.append("event must be 0 or 1")
    try:
        cohort.pathways.validate(len(cohort.gene_names))
    except MembershipError as exc:
        problems.append(str(exc))
    dims = {b.shape[1] for b in cohort.bags if b.ndim == 2}
    if len(dims) != 1:
        problems.append("patch bags have inconsistent feature dimension")
    for pid, bag in zip(cohort.ids, cohort.bags):
        if bag.ndim != 2 or bag.shape[0] == 0 or not np.all(np.isfinite(bag)):
            problems.append(f"patch bag {pid} is empty or non-finite")
    return problems


# ---------------------------------------------------------------- folds


def split_folds(cohort: Cohort, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Site- and event-stratified k-fold split; returns (train, test) index arrays.

    Within each site, events are dealt before censored patients with a single
    round-robin pointer that carries over between sites, so per-site and
    per-fold counts differ by at most one.
    """
    return stratified_folds(cohort.sites, cohort.events, k, seed)


def stratified_folds(sites, events, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    sites = np.asarray(sites)
    events = np.asarray(events)
    n = sites.shape[0]
    if k < 2:
        raise ConfigError("k must be at least 2")
    if k > n:
        raise ConfigError(f"k={k} exceeds number of patients {n}")
    rng = np.random.default_rng([seed, 2])
    assign = np.empty(n, dtype=np.int64)
    pointer = 0
    for site in np.unique(sites):
        for ev in (1, 0):
            members = np.flatnonzero((sites == site) & (events == ev))
            members = members[rng.permutation(members.size)]
            for idx in members:
                assign[idx] = pointer % k
                pointer += 1
    all_idx = np.arange(n)
    return [(all_idx[assign != f], all_idx[assign == f]) for f in range(k)]
