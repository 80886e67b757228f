"""Experiment orchestration: configs, the five experiment families, reports."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import cem
from .assembly import assemble_load, assemble_operators, norm_a, norm_l2
from .coeff import ModelKind, ModelSpec, generate
from .fine import exact_benchmark, interpolate_edge, solve_fine
from .mesh import LOCAL_EDGES, NestedMesh, build_nested_mesh, transverse_axes

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

OUTPUT_ENV = "CEMAXWELL_OUTPUT"
CSV_COLUMNS = (
    "family", "k", "H", "h", "m", "l", "contrast", "ref_kind", "err_a_rel", "err_l2_rel",
    "lambda_min_next", "rescheck", "t_spectral_s", "t_basis_s", "t_coarse_s", "t_fine_s",
)
FAMILIES = ("homogeneous", "wave", "model1", "model2", "contrast")


class ConfigError(ValueError):
    pass


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_ENV, "results")


@dataclass
class ExperimentConfig:
    family: str = "homogeneous"
    model: ModelSpec = field(default_factory=ModelSpec)
    k: float = 4.0
    H_list: tuple = (0.25, 0.125)
    k_list: tuple = ()  # wave sweep: paired with H_list
    n_fine: int = 32  # fine cells per axis, h = 1/n_fine
    m_list: tuple = (1, 2, 3)
    l: int = 4
    contrast_list: tuple = (10.0, 1e3)
    contrast_H: float = 0.125
    boundary: str = "consistent"  # benchmark impedance data: consistent | published
    reference: str = "exact"  # homogeneous families: exact | fine
    fem_rows: bool = True
    rtol: float = 1e-10
    strict: bool = False
    jobs: int = 1
    output_dir: str = field(default_factory=default_output_dir)
    cache: bool = False
    timings: bool = False
    slices: bool = True
    resolution_threshold: float = cem.RESOLUTION_THRESHOLD
    galerkin_check: bool = False

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSpec(**self.model)
        self.H_list = tuple(float(v) for v in self.H_list)
        self.k_list = tuple(float(v) for v in self.k_list)
        self.m_list = tuple(int(v) for v in self.m_list)
        self.contrast_list = tuple(float(v) for v in self.contrast_list)
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.k <= 0 or any(k <= 0 for k in self.k_list):
            raise ConfigError("wavenumbers must be positive")
        if self.n_fine < 1:
            raise ConfigError("n_fine must be positive")
        if any(m < 0 for m in self.m_list):
            raise ConfigError("oversampling layers must be nonnegative")
        if self.l < 1:
            raise ConfigError("l must be at least 1")
        for H in (self.contrast_H,) if self.family == "contrast" else self.H_list:
            self.coarse_per_axis(H)
        if self.family == "wave" and len(self.k_list) != len(self.H_list):
            raise ConfigError("wave sweep needs k_list and H_list of equal length")
        if self.boundary not in ("consistent", "published"):
            raise ConfigError(f"unknown boundary variant {self.boundary!r}")
        if self.reference not in ("exact", "fine"):
            raise ConfigError(f"unknown reference kind {self.reference!r}")
        if any(c <= 0 for c in self.contrast_list):
            raise ConfigError("contrast ratios must be positive")

    def coarse_per_axis(self, H: float) -> int:
        """Coarse cells per axis for H, checking that H divides 1 and h divides H."""
        frac = Fraction(H).limit_denominator(1 << 16)
        if frac <= 0 or frac.numerator != 1 or abs(float(frac) - H) > 1e-12:
            raise ConfigError(f"H = {H} is not of the form 1/N")
        nc = frac.denominator
        if self.n_fine % nc:
            raise ConfigError(f"h = 1/{self.n_fine} does not divide H = 1/{nc}")
        return nc

    def mesh(self, H: float) -> NestedMesh:
        nc = self.coarse_per_axis(H)
        return build_nested_mesh(nc, self.n_fine // nc)


def _coerce(key, value, current):
    if isinstance(current, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(_number(v) for v in value)
    if isinstance(current, float):
        return float(_number(value))
    if isinstance(current, int):
        return int(value)
    return value


def _number(v):
    if isinstance(v, str):
        v = v.strip()
        if "/" in v:
            return float(Fraction(v))
        return float(v)
    return v


def load_config(path=None, overrides: dict | None = None, defaults: dict | None = None) -> ExperimentConfig:
    """Config from ``defaults``, then a TOML file (keys mirror ExperimentConfig,
    model in a [model] table), then flag ``overrides``."""
    data = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    merged = dict(defaults or {})
    model = dict(merged.pop("model", {}) or {})
    model.update(data.pop("model", {}) or {})
    merged.update(data)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    model.update(merged.pop("model", {}) or {})
    base = ExperimentConfig()
    kwargs = {}
    for key, value in merged.items():
        if key not in ExperimentConfig.__dataclass_fields__:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = _coerce(key, value, getattr(base, key))
        except (TypeError, ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None
    try:
        kwargs["model"] = ModelSpec(**model)
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def paper_scale(cfg: ExperimentConfig, keep=()) -> ExperimentConfig:
    """h = 1/64 and H down to 1/16; fields named in ``keep`` are left alone."""
    changes = dict(n_fine=64)
    if cfg.family in ("homogeneous", "model1", "model2"):
        changes.update(H_list=(0.25, 0.125, 0.0625), m_list=(1, 2, 3, 4))
    elif cfg.family == "wave":
        changes.update(k_list=(4.0, 8.0, 16.0, 32.0), H_list=(0.25, 0.125, 0.0625, 0.03125))
    elif cfg.family == "contrast":
        changes.update(contrast_H=0.0625, m_list=(1, 2, 3, 4), contrast_list=(10.0, 1e2, 1e3, 1e4))
    return dataclasses.replace(cfg, **{k: v for k, v in changes.items() if k not in keep})


# ---------------------------------------------------------------------------
# reports


@dataclass
class ErrorRow:
    family: str
    k: float
    H: float
    h: float
    m: int | None
    l: int | None
    contrast: float
    ref_kind: str
    err_a_rel: float
    err_l2_rel: float
    lambda_min_next: float | None = None
    rescheck: float | None = None
    t_spectral_s: float | None = None
    t_basis_s: float | None = None
    t_coarse_s: float | None = None
    t_fine_s: float | None = None

    def key(self):
        return (self.family, self.k, self.H, self.h, -1 if self.m is None else self.m, self.contrast)


@dataclass
class ErrorReport:
    family: str
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def add(self, row: ErrorRow):
        if any(r.key() == row.key() for r in self.rows):
            raise ValueError(f"duplicate report row {row.key()}")
        if row.err_a_rel < 0 or row.err_l2_rel < 0:
            raise ValueError("errors must be nonnegative")
        self.rows.append(row)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: r.key())


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6e}"
    return str(v)


def report_csv(report: ErrorReport, timings: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.sorted_rows():
        vals = []
        for c in CSV_COLUMNS:
            v = getattr(r, c)
            if c.startswith("t_") and not timings:
                v = None
            vals.append(_fmt(v))
        w.writerow(vals)
    return buf.getvalue()


def report_summary(report: ErrorReport) -> str:
    lines = [f"family: {report.family}", f"rows: {len(report.rows)}"]
    for r in report.sorted_rows():
        m = "FEM" if r.m is None else f"m={r.m}"
        t = " ".join(f"{c[2:-2]}={getattr(r, c):.2f}s" for c in CSV_COLUMNS if c.startswith("t_")
                     and getattr(r, c) is not None)
        extra = "" if r.rescheck is None else f" Lambda={r.lambda_min_next:.4g} res={r.rescheck:.3g}"
        lines.append(f"k={r.k:g} H={r.H:g} h={r.h:g} contrast={r.contrast:g} {m}: "
                     f"a={r.err_a_rel:.4e} L2={r.err_l2_rel:.4e}{extra} {t}".rstrip())
    lines += [f"note: {n}" for n in report.notes]
    return "\n".join(lines) + "\n"


def emit_report(report: ErrorReport, path, timings: bool = False):
    """Write ``<path>.csv`` and ``<path>.txt``; returns both paths."""
    path = Path(path)
    if path.suffix == ".csv":
        path = path.with_suffix("")
    csv_path, txt_path = path.with_suffix(".csv"), path.with_suffix(".txt")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(report_csv(report, timings))
        txt_path.write_text(report_summary(report))
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return csv_path, txt_path


# ---------------------------------------------------------------------------
# building blocks


def unit_source(pts):
    return np.ones((len(pts), 3), dtype=complex)


@dataclass
class Problem:
    mesh: NestedMesh
    field: object
    k: float
    ops: object
    load: object
    reference: np.ndarray
    ref_kind: str
    t_fine: float = 0.0
    fine: np.ndarray | None = None


def homogeneous_problem(cfg: ExperimentConfig, mesh: NestedMesh, k: float) -> Problem:
    fld = generate(ModelSpec(kind=ModelKind.HOMOGENEOUS), mesh)
    u, f, g = exact_benchmark(k, cfg.boundary)
    ops = assemble_operators(mesh, fld, None, k)
    load = assemble_load(mesh, None, f, g, source=f"benchmark k={k:g} ({cfg.boundary})")
    t0 = time.perf_counter()
    if cfg.reference == "exact":
        ref = interpolate_edge(mesh, u)
    else:
        ref = solve_fine(ops, load, cfg.rtol).u
    return Problem(mesh, fld, k, ops, load, ref, cfg.reference, time.perf_counter() - t0)


def heterogeneous_problem(cfg: ExperimentConfig, mesh: NestedMesh, spec: ModelSpec, k: float) -> Problem:
    fld = generate(spec, mesh)
    ops = assemble_operators(mesh, fld, None, k)
    load = assemble_load(mesh, None, unit_source, None, source="f=(1,1,1), g=0")
    t0 = time.perf_counter()
    ref = solve_fine(ops, load, cfg.rtol).u
    return Problem(mesh, fld, k, ops, load, ref, "fine", time.perf_counter() - t0)


def relative_errors(ops, ref, u):
    e = ref - u
    na, nl = norm_a(ops, ref), norm_l2(ops, ref)
    return norm_a(ops, e) / na, norm_l2(ops, e) / nl


def _cache_header(prob: Problem, H, m, l, strict):
    return {
        "n_coarse": prob.mesh.n_coarse_per_axis, "n_fine_per_coarse": prob.mesh.n_fine_per_coarse,
        "field": prob.field.digest(), "k": prob.k, "H": H, "m": m, "l": l, "strict": strict,
    }


def _cached_basis(cfg, prob, aux, m, H):
    if not cfg.cache:
        return cem.build_multiscale_basis(prob.mesh, prob.field, prob.k, aux, m, cfg.strict, H, cfg.jobs)
    header = _cache_header(prob, H, m, cfg.l, cfg.strict)
    tag = hashlib.sha256(json.dumps(header, sort_keys=True).encode()).hexdigest()[:16]
    path = Path(cfg.output_dir) / "cache" / f"basis-{tag}.npz"
    basis = load_basis(path, prob.mesh, header)
    if basis is None:
        basis = cem.build_multiscale_basis(prob.mesh, prob.field, prob.k, aux, m, cfg.strict, H, cfg.jobs)
        save_basis(path, basis, header)
    return basis


def save_basis(path, basis: cem.MultiscaleBasis, header: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"b{b.element}": b.vectors for b in basis.blocks}
    np.savez(path, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_basis(path, mesh: NestedMesh, header: dict):
    """Cached basis or None when missing or built for different parameters."""
    from .mesh import extract_patch

    path = Path(path)
    if not path.exists():
        return None
    with np.load(path) as data:
        if json.loads(str(data["header"])) != header:
            return None
        blocks = []
        for i in range(mesh.n_coarse):
            patch = extract_patch(mesh, i, header["m"])
            vec = data[f"b{i}"]
            if vec.shape != (patch.n_edges, header["l"]):
                return None
            blocks.append(cem.BasisBlock(i, patch, vec, np.flatnonzero(patch.free_mask(header["strict"]))))
    return cem.MultiscaleBasis(mesh, header["m"], header["strict"], tuple(blocks))


def multiscale_rows(cfg: ExperimentConfig, prob: Problem, family: str, contrast: float,
                    report: ErrorReport, H: float | None = None):
    """Rows for every m in the config on one problem; aux space built once."""
    mesh = prob.mesh
    H = mesh.H if H is None else H
    t0 = time.perf_counter()
    aux = cem.compute_auxiliary(mesh, prob.field, prob.k, cfg.l, H)
    t_spec = time.perf_counter() - t0
    rc = cem.resolution_check(prob.k, H, prob.field.mu_max, aux.Lambda, cfg.resolution_threshold)
    if not rc.satisfied:
        report.notes.append(f"k={prob.k:g} H={H:g} contrast={contrast:g}: resolution value "
                            f"{rc.value:.3g} >= {rc.threshold:g}")
    if cfg.galerkin_check:
        # before any basis is held in memory
        fine_reference(prob, cfg.rtol)
    out = {}
    for m in cfg.m_list:
        t0 = time.perf_counter()
        basis = _cached_basis(cfg, prob, aux, m, H)
        t_basis = time.perf_counter() - t0
        t0 = time.perf_counter()
        cp = cem.assemble_coarse(prob.ops, basis, prob.load, aux, prob.field)
        t_coarse = time.perf_counter() - t0
        ea, el = relative_errors(prob.ops, prob.reference, cp.u_ms)
        report.add(ErrorRow(family, prob.k, H, mesh.h, m, cfg.l, contrast, prob.ref_kind, ea, el,
                            aux.Lambda, rc.value, t_spec, t_basis, t_coarse, prob.t_fine))
        if cfg.galerkin_check:
            report.diagnostics[("galerkin", prob.k, H, m, contrast)] = galerkin_check(prob, basis, cp, cfg.rtol)
        out[m] = cp
        del basis
    return out


def fine_reference(prob: Problem, rtol=1e-10) -> np.ndarray:
    """The fine solution u_h, solved once per problem."""
    if prob.ref_kind == "fine":
        return prob.reference
    if prob.fine is None:
        prob.fine = solve_fine(prob.ops, prob.load, rtol).u
    return prob.fine


def galerkin_check(prob: Problem, basis: cem.MultiscaleBasis, cp: cem.CoarseProblem, rtol=1e-10) -> dict:
    """max_q |B(u_h - u_ms, psi_q*)| relative to |u_h|_a max_q |psi_q*|_a."""
    uh = fine_reference(prob, rtol)
    d = cem.galerkin_defect(prob.ops, basis, uh - cp.u_ms)
    psi_norm = float(np.max(cem.column_norms(prob.ops.a_matrix(), basis)))
    scale = norm_a(prob.ops, uh) * psi_norm
    return {"max_defect": float(np.max(np.abs(d))), "scale": float(scale),
            "ratio": float(np.max(np.abs(d)) / scale)}


def fem_row(cfg: ExperimentConfig, family: str, k: float, H: float, report: ErrorReport):
    """Plain edge-element solve on the coarse mesh itself (h = H) against the exact solution."""
    nc = cfg.coarse_per_axis(H)
    mesh = build_nested_mesh(nc, 1)
    fld = generate(ModelSpec(), mesh)
    u, f, g = exact_benchmark(k, cfg.boundary)
    ops = assemble_operators(mesh, fld, None, k)
    t0 = time.perf_counter()
    uh = solve_fine(ops, assemble_load(mesh, None, f, g), cfg.rtol).u
    t = time.perf_counter() - t0
    ui = interpolate_edge(mesh, u)
    ea, el = relative_errors(ops, ui, uh)
    report.add(ErrorRow(family, k, H, mesh.h, None, None, 1.0, "exact", ea, el, t_fine_s=t))


# ---------------------------------------------------------------------------
# experiment families


def run_homogeneous(cfg: ExperimentConfig) -> ErrorReport:
    report = ErrorReport("homogeneous")
    for H in cfg.H_list:
        mesh = cfg.mesh(H)
        if cfg.fem_rows:
            fem_row(cfg, "homogeneous", cfg.k, H, report)
        prob = homogeneous_problem(cfg, mesh, cfg.k)
        multiscale_rows(cfg, prob, "homogeneous", 1.0, report)
    return report


def run_wave_sweep(cfg: ExperimentConfig) -> ErrorReport:
    report = ErrorReport("wave")
    for k, H in zip(cfg.k_list, cfg.H_list):
        mesh = cfg.mesh(H)
        if cfg.fem_rows:
            fem_row(cfg, "wave", k, H, report)
        prob = homogeneous_problem(cfg, mesh, k)
        multiscale_rows(cfg, prob, "wave", 1.0, report)
    return report


def _model_run(cfg: ExperimentConfig, family: str, kind: ModelKind) -> ErrorReport:
    report = ErrorReport(family)
    spec = dataclasses.replace(cfg.model, kind=kind)
    for H in cfg.H_list:
        mesh = cfg.mesh(H)
        prob = heterogeneous_problem(cfg, mesh, spec, cfg.k)
        solves = multiscale_rows(cfg, prob, family, prob.field.contrast, report)
        if cfg.slices and solves:
            m = max(solves)
            out = Path(cfg.output_dir)
            tag = f"{family}_H{mesh.n_coarse_per_axis}_m{m}"
            export_slice(mesh, prob.reference, out / f"{tag}_ref_slice.csv")
            export_slice(mesh, solves[m].u_ms, out / f"{tag}_ms_slice.csv")
    return report


def run_model1(cfg: ExperimentConfig) -> ErrorReport:
    return _model_run(cfg, "model1", ModelKind.RANDOM_CUBES)


def run_model2(cfg: ExperimentConfig) -> ErrorReport:
    return _model_run(cfg, "model2", ModelKind.PERIODIC_RODS)


def contrast_spec(base: ModelSpec, contrast: float) -> ModelSpec:
    if contrast == 1.0:
        return dataclasses.replace(base, kind=ModelKind.HOMOGENEOUS)
    return dataclasses.replace(base, kind=ModelKind.PERIODIC_RODS,
                               inclusion_value=contrast * base.background_value)


def run_contrast_sweep(cfg: ExperimentConfig) -> ErrorReport:
    report = ErrorReport("contrast")
    mesh = cfg.mesh(cfg.contrast_H)
    for c in cfg.contrast_list:
        prob = heterogeneous_problem(cfg, mesh, contrast_spec(cfg.model, c), cfg.k)
        multiscale_rows(cfg, prob, "contrast", c, report)
    return report


RUNNERS = {
    "homogeneous": run_homogeneous,
    "wave": run_wave_sweep,
    "model1": run_model1,
    "model2": run_model2,
    "contrast": run_contrast_sweep,
}


def run(cfg: ExperimentConfig) -> ErrorReport:
    return RUNNERS[cfg.family](cfg)


# ---------------------------------------------------------------------------
# field evaluation and slices


def evaluate_cells(mesh: NestedMesh, u, xi) -> np.ndarray:
    """Edge field evaluated at local coordinates ``xi`` (3,) inside every cell.

    Returns ``(n_cells, 3)`` complex values, cells ordered by (z, y, x).
    """
    ce = mesh.cell_edges
    u = np.asarray(u)
    out = np.zeros((len(ce), 3), dtype=complex)
    for e, (d, off) in enumerate(LOCAL_EDGES):
        p, q = transverse_axes(d)
        wp = xi[p] if off[p] else 1 - xi[p]
        wq = xi[q] if off[q] else 1 - xi[q]
        out[:, d] += wp * wq * u[ce[:, e]] / mesh.h
    return out


def slice_magnitude(mesh: NestedMesh, u, z: float = 0.5) -> np.ndarray:
    """|u| at cell-centre (x, y) on the plane z, shape (n, n) indexed [y, x]."""
    n = mesh.n
    kz = min(int(np.floor(z * n)), n - 1)
    zeta = z * n - kz
    vals = evaluate_cells(mesh, u, np.array([0.5, 0.5, zeta]))
    layer = vals.reshape(n, n, n, 3)[kz]
    return np.sqrt(np.sum(np.abs(layer) ** 2, axis=-1))


def export_slice(mesh: NestedMesh, u, path, z: float = 0.5):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, slice_magnitude(mesh, u, z), delimiter=",", fmt="%.6e")
    return path
