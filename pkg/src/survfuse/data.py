"""Synthetic bimodal cohorts with proportional-hazards ground truth.

A cohort pairs, per sample, a bag of patch-feature vectors (stand-in for
slide embeddings) with per-pathway gene-expression vectors plus right-
censored follow-up. The generator plants a known latent structure: a shared
factor drives both modalities, modality-private factors drive one each, and
the true log hazard is linear in all three, so downstream models can be
scored against a known signal.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError
from .numerics import Rng
from .serialize import dump_json, format_float, load_json


@dataclass(frozen=True)
class Pathway:
    name: str
    gene_indices: tuple


@dataclass(frozen=True)
class PathwayCatalog:
    """Ordered list of named gene sets; indices point into the gene vector."""

    entries: tuple

    def __post_init__(self):
        names = [p.name for p in self.entries]
        if len(set(names)) != len(names):
            raise DataError("pathway names must be unique")
        for p in self.entries:
            if len(p.gene_indices) == 0:
                raise DataError(f"pathway {p.name!r} has an empty gene set")

    def __len__(self):
        return len(self.entries)

    @property
    def sizes(self):
        return [len(p.gene_indices) for p in self.entries]

    def save(self, path):
        dump_json([{"name": p.name, "gene_indices": list(p.gene_indices)}
                   for p in self.entries], path)

    @classmethod
    def load(cls, path):
        raw = load_json(path)
        entries = tuple(Pathway(item["name"], tuple(int(g) for g in item["gene_indices"]))
                        for item in raw)
        return cls(entries)


@dataclass(frozen=True)
class CohortSample:
    sample_id: str
    site_id: str
    patch_features: np.ndarray   # (n_patches, d_patch)
    pathway_inputs: tuple        # one vector per catalog entry
    time: float                  # months
    event: bool                  # True = death observed


@dataclass(frozen=True)
class Cohort:
    samples: tuple
    catalog: PathwayCatalog

    def __len__(self):
        return len(self.samples)

    @property
    def d_patch(self):
        return self.samples[0].patch_features.shape[1]

    def validate(self):
        for s in self.samples:
            if s.patch_features.ndim != 2 or s.patch_features.shape[0] == 0:
                raise DataError(f"sample {s.sample_id}: patch features must be "
                                "a non-empty matrix")
            if len(s.pathway_inputs) != len(self.catalog):
                raise DataError(f"sample {s.sample_id}: expected "
                                f"{len(self.catalog)} pathway inputs, got "
                                f"{len(s.pathway_inputs)}")
            for pw, vec in zip(self.catalog.entries, s.pathway_inputs):
                if len(vec) != len(pw.gene_indices):
                    raise DataError(f"sample {s.sample_id}: pathway {pw.name!r} "
                                    f"input has length {len(vec)}, catalog "
                                    f"expects {len(pw.gene_indices)}")
            if s.time < 0:
                raise DataError(f"sample {s.sample_id}: negative time {s.time}")
        return self


@dataclass(frozen=True)
class SyntheticGroundTruth:
    """Latents behind a generated cohort. Oracle only; never fed to training."""

    sample_ids: tuple
    u_shared: np.ndarray
    u_img: np.ndarray
    u_gen: np.ndarray
    true_log_hazard: np.ndarray

    def save(self, path):
        dump_json({
            "sample_ids": list(self.sample_ids),
            "u_shared": self.u_shared,
            "u_img": self.u_img,
            "u_gen": self.u_gen,
            "true_log_hazard": self.true_log_hazard,
        }, path)

    @classmethod
    def load(cls, path):
        raw = load_json(path)
        return cls(tuple(raw["sample_ids"]),
                   np.asarray(raw["u_shared"], dtype=np.float64),
                   np.asarray(raw["u_img"], dtype=np.float64),
                   np.asarray(raw["u_gen"], dtype=np.float64),
                   np.asarray(raw["true_log_hazard"], dtype=np.float64))


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple  # k disjoint tuples of sample ids

    def fold_of(self, sample_id):
        for i, fold in enumerate(self.folds):
            if sample_id in fold:
                return i
        raise DataError(f"sample {sample_id!r} not present in any fold")


@dataclass(frozen=True)
class SimulationConfig:
    """Knobs of the synthetic generator. Defaults give a strong, learnable
    survival signal split between the two modalities."""

    n_samples: int = 600
    n_sites: int = 10
    d_patch: int = 16
    shared_dim: int = 2
    image_dim: int = 2
    gene_dim: int = 2
    n_patch_components: int = 8
    component_scale: float = 3.0
    patch_noise: float = 1.0
    mix_strength: float = 1.3
    patches_min: int = 48
    patches_max: int = 96
    n_genes: int = 200
    n_pathways: int = 50
    pathway_min_genes: int = 4
    pathway_max_genes: int = 10
    gene_signal: float = 1.0
    gene_noise: float = 0.5
    hazard_shared: float = 1.1
    hazard_image: float = 0.9
    hazard_gene: float = 0.9
    baseline_hazard: float = 0.02   # events per month at log-hazard 0
    censor_rate: float = 0.3
    site_shift: float = 0.25
    admin_cutoff: float | None = None

    def validate(self):
        if self.n_samples < 4:
            raise ConfigError("n_samples must be at least 4")
        if self.d_patch < 2:
            raise ConfigError("d_patch must be at least 2")
        if not (0.0 <= self.censor_rate < 1.0):
            raise ConfigError("censor_rate must lie in [0, 1)")
        if self.n_sites < 1:
            raise ConfigError("n_sites must be positive")
        if self.patches_min < 1 or self.patches_max < self.patches_min:
            raise ConfigError("invalid patches_min/patches_max range")
        if self.pathway_min_genes < 1 or self.pathway_max_genes < self.pathway_min_genes:
            raise ConfigError("invalid pathway gene-count range")
        if self.pathway_max_genes > self.n_genes:
            raise ConfigError("pathway_max_genes exceeds n_genes")
        if self.baseline_hazard <= 0:
            raise ConfigError("baseline_hazard must be positive")
        if self.admin_cutoff is not None and self.admin_cutoff <= 0:
            raise ConfigError("admin_cutoff must be positive when set")
        return self


def _unit_vector(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def generate_catalog(config, rng):
    sizes = rng.integers(config.pathway_min_genes, config.pathway_max_genes + 1,
                         size=config.n_pathways)
    entries = []
    for i in range(config.n_pathways):
        genes = np.sort(rng.choice(config.n_genes, size=int(sizes[i]), replace=False))
        entries.append(Pathway(f"PW{i:02d}", tuple(int(g) for g in genes)))
    return PathwayCatalog(tuple(entries))


def generate_cohort(config, seed):
    """Draw a cohort plus its hidden ground truth, deterministically."""
    config.validate()
    root = Rng(seed)

    struct = root.child("structure")
    catalog = generate_catalog(config, struct.child("catalog"))
    centers = struct.child("centers").normal(
        scale=config.component_scale, size=(config.n_patch_components, config.d_patch))
    mix_map = struct.child("mixture").normal(
        size=(config.n_patch_components, config.shared_dim + config.image_dim))
    gene_map = struct.child("genes").normal(
        scale=config.gene_signal, size=(config.n_genes, config.shared_dim + config.gene_dim))
    dir_rng = struct.child("hazard")
    dir_shared = _unit_vector(dir_rng, config.shared_dim)
    dir_img = _unit_vector(dir_rng, config.image_dim)
    dir_gen = _unit_vector(dir_rng, config.gene_dim)
    site_shifts = struct.child("sites").normal(
        scale=config.site_shift, size=(config.n_sites, config.d_patch))

    draw = root.child("samples")
    n = config.n_samples
    u_shared = draw.child("u_shared").normal(size=(n, config.shared_dim))
    u_img = draw.child("u_img").normal(size=(n, config.image_dim))
    u_gen = draw.child("u_gen").normal(size=(n, config.gene_dim))
    sites = draw.child("sites").integers(0, config.n_sites, size=n)
    counts = draw.child("counts").integers(config.patches_min, config.patches_max + 1, size=n)

    log_hazard = (config.hazard_shared * u_shared @ dir_shared
                  + config.hazard_image * u_img @ dir_img
                  + config.hazard_gene * u_gen @ dir_gen)

    event_raw = draw.child("events").exponential(size=n)
    event_times = event_raw / (config.baseline_hazard * np.exp(log_hazard))

    if config.censor_rate > 0.0:
        censor_raw = draw.child("censor").exponential(size=n)
        # Pick the censoring rate so that exactly round(rate * n) samples are
        # censored: censoring hits sample i iff rate > censor_raw_i / T_i.
        ratios = np.sort(censor_raw / event_times)
        k = int(round(config.censor_rate * n))
        k = min(max(k, 0), n - 1)
        if k == 0:
            censor_times = np.full(n, np.inf)
        else:
            censor_scale = 2.0 / (ratios[k - 1] + ratios[k])
            censor_times = censor_raw * censor_scale
    else:
        censor_times = np.full(n, np.inf)

    times = np.minimum(event_times, censor_times)
    events = event_times <= censor_times
    if config.admin_cutoff is not None:
        over = times > config.admin_cutoff
        times = np.where(over, config.admin_cutoff, times)
        events = events & ~over

    patch_rng = draw.child("patches")
    gene_rng = draw.child("expression")
    samples = []
    for i in range(n):
        logits = config.mix_strength * mix_map @ np.concatenate([u_shared[i], u_img[i]])
        logits -= logits.max()
        weights = np.exp(logits)
        weights /= weights.sum()
        m = int(counts[i])
        comp = patch_rng.child(f"assign/{i}")._gen.choice(
            config.n_patch_components, size=m, p=weights)
        noise = patch_rng.child(f"noise/{i}").normal(size=(m, config.d_patch))
        patches = centers[comp] + config.patch_noise * noise + site_shifts[sites[i]]

        expr = gene_map @ np.concatenate([u_shared[i], u_gen[i]])
        expr = expr + config.gene_noise * gene_rng.child(str(i)).normal(size=config.n_genes)
        pathway_inputs = tuple(expr[np.array(p.gene_indices)] for p in catalog.entries)

        samples.append(CohortSample(
            sample_id=f"case_{i:04d}",
            site_id=f"S{int(sites[i]):02d}",
            patch_features=patches,
            pathway_inputs=pathway_inputs,
            time=float(times[i]),
            event=bool(events[i]),
        ))

    cohort = Cohort(tuple(samples), catalog).validate()
    truth = SyntheticGroundTruth(
        sample_ids=tuple(s.sample_id for s in samples),
        u_shared=u_shared, u_img=u_img, u_gen=u_gen,
        true_log_hazard=log_hazard)
    return cohort, truth


# -- follow-up truncation and splitting -------------------------------------

def truncate_followup(cohort, tau):
    """Administratively censor every follow-up longer than `tau` months."""
    if tau <= 0:
        raise ConfigError("truncation time must be positive")
    samples = []
    for s in cohort.samples:
        if s.time > tau:
            samples.append(replace(s, time=float(tau), event=False))
        else:
            samples.append(s)
    return Cohort(tuple(samples), cohort.catalog)


def split_stratified(cohort, k, seed):
    """Assign whole collection sites to k folds, greedily balancing sizes.

    Sites are placed largest first into the currently smallest fold; the
    seed only breaks ties among equally sized sites and folds.
    """
    if k < 2:
        raise ConfigError("need at least 2 folds")
    site_members = {}
    for s in cohort.samples:
        site_members.setdefault(s.site_id, []).append(s.sample_id)
    if len(site_members) < k:
        raise DataError(f"only {len(site_members)} sites for {k} folds")

    rng = Rng(seed).child("split")
    site_names = sorted(site_members)
    jitter = rng.permutation(len(site_names))
    order = sorted(range(len(site_names)),
                   key=lambda i: (-len(site_members[site_names[i]]), jitter[i]))

    fold_sizes = [0] * k
    fold_members = [[] for _ in range(k)]
    for i in order:
        target = min(range(k), key=lambda f: (fold_sizes[f], f))
        fold_members[target].extend(site_members[site_names[i]])
        fold_sizes[target] += len(site_members[site_names[i]])

    index = {s.sample_id: j for j, s in enumerate(cohort.samples)}
    folds = tuple(tuple(sorted(members, key=index.__getitem__))
                  for members in fold_members)
    return FoldSplit(folds)


# -- file round trip ---------------------------------------------------------

def save_cohort(cohort, out_dir):
    """Write manifest + catalog + per-sample patch/pathway files; returns
    the manifest path. Layout matches what `load_cohort` expects."""
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "patches"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "pathways"), exist_ok=True)
    cohort.catalog.save(os.path.join(out_dir, "catalog.json"))

    records = []
    for s in cohort.samples:
        patch_rel = f"patches/{s.sample_id}.csv"
        pathway_rel = f"pathways/{s.sample_id}.json"
        _write_patch_matrix(os.path.join(out_dir, patch_rel), s.patch_features)
        dump_json({p.name: vec for p, vec in zip(cohort.catalog.entries, s.pathway_inputs)},
                  os.path.join(out_dir, pathway_rel))
        records.append({
            "sample_id": s.sample_id,
            "site_id": s.site_id,
            "time": float(s.time),
            "event": bool(s.event),
            "patch_file": patch_rel,
            "pathway_file": pathway_rel,
        })

    manifest_path = os.path.join(out_dir, "manifest.json")
    dump_json({"format_version": 1, "catalog": "catalog.json", "samples": records},
              manifest_path)
    return manifest_path


def _write_patch_matrix(path, matrix):
    with open(path, "w", encoding="utf-8") as fh:
        for row in matrix:
            fh.write(",".join(format_float(x) for x in row) + "\n")


def _read_patch_matrix(path):
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(f"{path}: row {lineno} has {len(cells)} columns, "
                                f"expected {width}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty patch matrix")
    return np.asarray(rows, dtype=np.float64)


def load_cohort(manifest_path):
    """Read a cohort back from a manifest; validation failures carry the
    offending file / sample id."""
    if not os.path.exists(manifest_path):
        raise DataError(f"manifest not found: {manifest_path}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    manifest = load_json(manifest_path)
    for key in manifest:
        if key not in ("format_version", "catalog", "samples"):
            raise DataError(f"manifest: unknown key {key!r}")

    catalog_path = os.path.join(base, manifest["catalog"])
    if not os.path.exists(catalog_path):
        raise DataError(f"catalog file not found: {catalog_path}")
    catalog = PathwayCatalog.load(catalog_path)

    samples = []
    for rec in manifest["samples"]:
        sid = rec.get("sample_id", "<missing id>")
        if not isinstance(rec.get("event"), bool):
            raise DataError(f"sample {sid}: event must be a JSON boolean")
        time = rec.get("time")
        if not isinstance(time, (int, float)) or isinstance(time, bool):
            raise DataError(f"sample {sid}: time must be a number")
        if time < 0:
            raise DataError(f"sample {sid}: negative time {time}")

        patch_path = os.path.join(base, rec["patch_file"])
        if not os.path.exists(patch_path):
            raise DataError(f"sample {sid}: missing patch matrix {rec['patch_file']}")
        patches = _read_patch_matrix(patch_path)

        pathway_path = os.path.join(base, rec["pathway_file"])
        if not os.path.exists(pathway_path):
            raise DataError(f"sample {sid}: missing pathway file {rec['pathway_file']}")
        raw = load_json(pathway_path)
        inputs = []
        for pw in catalog.entries:
            if pw.name not in raw:
                raise DataError(f"sample {sid}: pathway {pw.name!r} missing "
                                f"from {rec['pathway_file']}")
            vec = np.asarray(raw[pw.name], dtype=np.float64)
            if vec.shape != (len(pw.gene_indices),):
                raise DataError(f"sample {sid}: pathway {pw.name!r} has length "
                                f"{vec.size}, catalog expects {len(pw.gene_indices)}")
            inputs.append(vec)

        samples.append(CohortSample(
            sample_id=rec["sample_id"], site_id=rec["site_id"],
            patch_features=patches, pathway_inputs=tuple(inputs),
            time=float(time), event=bool(rec["event"])))

    return Cohort(tuple(samples), catalog).validate()


def cohorts_equal(a, b):
    """Exact equality of two cohorts (used by round-trip tests)."""
    if len(a) != len(b) or len(a.catalog) != len(b.catalog):
        return False
    for pa, pb in zip(a.catalog.entries, b.catalog.entries):
        if pa.name != pb.name or pa.gene_indices != pb.gene_indices:
            return False
    for sa, sb in zip(a.samples, b.samples):
        if (sa.sample_id != sb.sample_id or sa.site_id != sb.site_id
                or sa.time != sb.time or sa.event != sb.event):
            return False
        if not np.array_equal(sa.patch_features, sb.patch_features):
            return False
        for va, vb in zip(sa.pathway_inputs, sb.pathway_inputs):
            if not np.array_equal(va, vb):
                return False
    return True
