"""Batch command-line interface and file formats.

Dataset CSV (one row per tooth)::

    subject_id,tooth_id,pd,cal,weight,x1,...,xP

Fit configuration: a flat TOML file of top-level keys (see ``CONFIG_KEYS``).
Column indices in ``groups`` and ``normal_prior_columns`` are 1-based.

Draws CSV columns, in order::

    a,delta,sigma2,d2,nu,rho1_sq,rho2,tau,beta_1..beta_P,lambda_1..lambda_G,xi_0..xi_L,replicate

Every output file starts with a ``#`` comment line carrying the tool
version, the seed and a hash of the effective configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, diagnostics, simlab
from .errors import DatasetError, StgpError
from .model import PanelDataset, Subject, max_row_norm, scale_rows
from .monobasis import BasisSpec
from .sampler import SCALAR_FIELDS, FitConfig, PosteriorDraws, Priors, run_chain
from .survey import WeightedSample, mcmc_prs, wfpbb

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

BASE_COLUMNS = ("subject_id", "tooth_id", "pd", "cal", "weight")
DEFAULT_PRS_J = 50
_FIT_KEYS = {f.name for f in fields(FitConfig)} - {"priors"}
_PRIOR_KEYS = {f.name for f in fields(Priors)}
CONFIG_KEYS = _FIT_KEYS | _PRIOR_KEYS | {"groups", "normal_prior_columns", "prs_replicates",
                                         "population_size", "rescale_weights", "threads"}


def _fmt(x):
    """Shortest repr that round-trips a float exactly."""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _comment(seed, config_hash):
    return f"# stgp {__version__} seed={seed} config_hash={config_hash}\n"


# ---------------------------------------------------------------------------
# Dataset I/O
# ---------------------------------------------------------------------------


def _read_rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.reader(lines))


def load_dataset(path, group_map=None, normal_prior_columns=(), scale="auto") -> PanelDataset:
    """Read a long-form CSV into a :class:`PanelDataset`.

    ``group_map`` and ``normal_prior_columns`` use 0-based column indices.
    ``scale``: "auto" rescales covariate rows only when some row norm
    exceeds 1, "always" rescales unconditionally, "never" leaves them.
    Row numbers in error messages count data rows from 1.
    """
    rows = _read_rows(path)
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if tuple(header[:5]) != BASE_COLUMNS:
        missing = [c for c in BASE_COLUMNS if c not in header]
        raise DatasetError(f"{path}: header must start with {','.join(BASE_COLUMNS)}; missing {missing}")
    xcols = header[5:]
    if not xcols or xcols != [f"x{k}" for k in range(1, len(xcols) + 1)]:
        raise DatasetError(f"{path}: covariate columns must be x1..xP, got {xcols}")
    P = len(xcols)
    order, data = [], {}
    for r, row in enumerate(rows[1:], start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5 + P:
            raise DatasetError(f"expected {5 + P} fields, found {len(row)}", row=r)
        sid = row[0].strip()
        try:
            vals = [float(c) for c in row[2:]]
        except ValueError as exc:
            raise DatasetError(f"non-numeric cell ({exc})", row=r) from None
        if not all(math.isfinite(v) for v in vals):
            raise DatasetError("non-finite cell", row=r)
        pd_, cal, w = vals[0], vals[1], vals[2]
        if not w > 0:
            raise DatasetError(f"weight must be positive, got {w}", row=r)
        if sid not in data:
            order.append(sid)
            data[sid] = {"w": w, "rows": []}
        elif data[sid]["w"] != w:
            raise DatasetError(f"subject {sid}: weight {w} differs from earlier {data[sid]['w']}", row=r)
        data[sid]["rows"].append((row[1].strip(), pd_, cal, vals[3:]))
    if not order:
        raise DatasetError(f"{path}: no data rows")
    subjects = []
    for sid in order:
        teeth = data[sid]["rows"]
        subjects.append(Subject(sid, [t[1] for t in teeth], [t[2] for t in teeth],
                                np.array([t[3] for t in teeth]), data[sid]["w"]))
    div = 1.0
    if scale == "always" or (scale == "auto" and max_row_norm(subjects) > 1.0):
        subjects, div = scale_rows(subjects)
    elif scale not in ("auto", "always", "never"):
        raise ValueError(f"unknown scale mode {scale!r}")
    return PanelDataset(tuple(subjects), group_map, normal_prior_columns, div)


def dataset_csv(dataset: PanelDataset, comment=None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(comment)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(BASE_COLUMNS) + [f"x{k}" for k in range(1, dataset.P + 1)])
    for s in dataset.subjects:
        for t in range(s.n_teeth):
            w.writerow([s.id, t + 1, _fmt(s.y_pd[t]), _fmt(s.y_cal[t]), _fmt(s.weight)]
                       + [_fmt(v) for v in s.X[t]])
    return buf.getvalue()


def write_dataset(dataset: PanelDataset, path, comment=None):
    Path(path).write_text(dataset_csv(dataset, comment))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CliConfig:
    """Effective settings for ``fit``: sampler settings plus grouping and PRS options."""

    fit: FitConfig
    groups: tuple = None          # 0-based
    normal_prior_columns: tuple = ()
    prs_replicates: int = 0       # 0 = plain single chain
    population_size: int = None
    rescale_weights: bool = False
    threads: int = 1

    def to_dict(self):
        d = asdict(self)
        d["fit"] = self.fit.as_dict()
        return d

    def hash(self, extra=""):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str) + extra
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_config(text: str, overrides=None) -> CliConfig:
    """Parse flat TOML text; ``overrides`` (dict) wins over file values."""
    raw = tomllib.loads(text) if text else {}
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(raw) - CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for k, v in raw.items():
        if isinstance(v, dict):
            raise ValueError(f"config must be flat; key {k!r} holds a table")
    priors = Priors(**{k: float(raw[k]) for k in _PRIOR_KEYS if k in raw})
    fit = FitConfig(priors=priors, **{k: raw[k] for k in _FIT_KEYS if k in raw})
    groups = raw.get("groups")
    if groups is not None:
        groups = tuple(tuple(int(c) - 1 for c in g) for g in groups)
    normal = tuple(int(c) - 1 for c in raw.get("normal_prior_columns", ()))
    J = int(raw.get("prs_replicates", 0))
    if J < 0:
        raise ValueError("prs_replicates must be >= 0")
    return CliConfig(fit, groups, normal, J, raw.get("population_size"), bool(raw.get("rescale_weights", False)),
                     int(raw.get("threads", 1)))


# ---------------------------------------------------------------------------
# Draws I/O
# ---------------------------------------------------------------------------


def draws_columns(P, G, L):
    return (list(SCALAR_FIELDS) + [f"beta_{k}" for k in range(1, P + 1)]
            + [f"lambda_{k}" for k in range(1, G + 1)] + [f"xi_{k}" for k in range(L + 1)] + ["replicate"])


def draws_csv(draws: PosteriorDraws, comment) -> str:
    P, G, L = draws.beta_raw.shape[1], draws.lam.shape[1], draws.xi.shape[1] - 1
    buf = io.StringIO()
    buf.write(comment)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(draws_columns(P, G, L))
    beta = draws.beta
    for k in range(draws.n_draws):
        w.writerow([_fmt(draws.scalars[n][k]) for n in SCALAR_FIELDS] + [_fmt(v) for v in beta[k]]
                   + [_fmt(v) for v in draws.lam[k]] + [_fmt(v) for v in draws.xi[k]] + [int(draws.replicate[k])])
    return buf.getvalue()


def matrix_csv(mat, columns, comment) -> str:
    buf = io.StringIO()
    buf.write(comment)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in np.atleast_2d(mat):
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def read_draws(path) -> PosteriorDraws:
    """Read a draws CSV back (per-subject latents and log-likelihood are not stored there)."""
    rows = _read_rows(path)
    header, body = rows[0], np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    body = body.reshape(-1, len(header))
    col = {name: i for i, name in enumerate(header)}

    def block(prefix):
        idx = [i for name, i in col.items() if name.startswith(prefix)]
        return body[:, idx]

    n = body.shape[0]
    empty = np.zeros((n, 0))
    return PosteriorDraws(
        scalars={name: body[:, col[name]] for name in SCALAR_FIELDS},
        beta_raw=block("beta_"), lam=block("lambda_"), xi=block("xi_"),
        b=empty, s=empty, u=empty, loglik=empty, replicate=body[:, col["replicate"]].astype(np.intp),
    )


def read_matrix(path):
    rows = _read_rows(path)
    return rows[0], np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args):
    scn = simlab.SimScenario(which=args.scenario, N=args.n)
    rng = np.random.default_rng(args.seed)
    result = simlab.simulate(scn, rng)
    cfg_hash = hashlib.sha256(json.dumps(scn.truth(), sort_keys=True).encode()).hexdigest()[:16]
    comment = _comment(args.seed, cfg_hash)
    data = result.dataset if args.scenario == "sim1" else result.sample
    if data is None:
        raise StgpError("no subject was selected into the sample")
    out = Path(args.out)
    write_dataset(data, out, comment)
    grid = simlab.index_grid(args.grid)
    truth = scn.truth()
    truth.update(seed=args.seed, row_scale=data.row_scale, grid=grid.tolist(),
                 true_index=simlab.true_index(grid).tolist())
    if args.scenario != "sim1":
        truth["selection_rate"] = result.selection_rate
        truth["population_size"] = result.population.N
    out.with_name(out.name + ".truth.json").write_text(json.dumps(truth, indent=1) + "\n")
    print(f"wrote {data.N} subjects to {out}")
    return 0


def _load_cli_config(args):
    text = Path(args.config).read_text() if args.config else ""
    over = {"seed": args.seed, "variant": args.variant, "iterations": args.iterations,
            "burn_in": args.burn_in, "thin": args.thin, "threads": args.threads}
    if args.prs is not None:
        over["prs_replicates"] = args.prs
    return parse_config(text, over)


def cmd_fit(args):
    t0 = time.time()
    cfg = _load_cli_config(args)
    data_bytes = Path(args.data).read_bytes()
    dataset = load_dataset(args.data, cfg.groups, cfg.normal_prior_columns)
    data_hash = hashlib.sha256(data_bytes).hexdigest()[:16]
    cfg_hash = cfg.hash(data_hash)
    seed = cfg.fit.seed
    if cfg.prs_replicates > 0:
        draws = mcmc_prs(dataset, cfg.fit, cfg.prs_replicates, cfg.population_size, cfg.rescale_weights,
                         seed=seed, workers=cfg.threads)
    else:
        draws = run_chain(dataset, cfg.fit, np.random.default_rng(seed))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    comment = _comment(seed, cfg_hash)
    (out / "draws.csv").write_text(draws_csv(draws, comment))
    if cfg.prs_replicates == 0:
        ids = [s.id for s in dataset.subjects]
        (out / "loglik.csv").write_text(matrix_csv(draws.loglik, ids, comment))
        lat = np.column_stack([draws.b.mean(0), draws.s.mean(0), draws.u.mean(0)])
        buf = io.StringIO()
        buf.write(comment)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "b", "s", "u"])
        for sid, row in zip(ids, lat):
            w.writerow([sid] + [_fmt(v) for v in row])
        (out / "latents.csv").write_text(buf.getvalue())
    manifest = {
        "version": __version__, "seed": seed, "config_hash": cfg_hash, "data_sha256_16": data_hash,
        "config": cfg.to_dict(), "subjects": dataset.N, "retained_draws": draws.n_draws,
        "row_scale": dataset.row_scale, "seconds": round(time.time() - t0, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=str) + "\n")
    print(json.dumps(manifest, default=str))
    return 0


def cmd_resample(args):
    dataset = load_dataset(args.data)
    sample = WeightedSample.from_dataset(dataset, args.pop_size, rescale=args.rescale)
    rng = np.random.default_rng(args.seed)
    idx, counts = wfpbb(sample, rng, return_counts=True)
    drawn = np.bincount(idx, minlength=dataset.N)
    buf = io.StringIO()
    buf.write(_comment(args.seed, hashlib.sha256(f"{args.pop_size}{args.rescale}".encode()).hexdigest()[:16]))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "weight", "pseudo_population_count", "resample_count"])
    for s, wt, c, d in zip(dataset.subjects, sample.weights, counts, drawn):
        w.writerow([s.id, _fmt(wt), int(c), int(d)])
    _emit(buf.getvalue(), args.out)
    return 0


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _inherited_comment(draws_path):
    first = Path(draws_path).read_text().splitlines()[0]
    return first + "\n" if first.startswith("#") else _comment("", "")


def _sibling(path, name):
    p = Path(path).with_name(name)
    return p if p.exists() else None


def cmd_diagnose(args):
    draws = read_draws(args.draws)
    basis = BasisSpec(draws.xi.shape[1] - 1)
    dataset = load_dataset(args.data)
    rows = [("draws", draws.n_draws)]
    ll_path = args.loglik or _sibling(args.draws, "loglik.csv")
    if ll_path:
        _, ll = read_matrix(ll_path)
        res = diagnostics.waic(ll)
        rows += [("waic", res.waic), ("p_waic", res.p_waic), ("lppd", res.lppd)]
    chk = diagnostics.delta_moment_selfcheck(draws)
    rows += [("delta_selfcheck_error", chk.abs_error), ("delta_selfcheck_nu", chk.nu_used)]
    for name in SCALAR_FIELDS:
        rows.append((f"mean_{name}", float(np.mean(draws.scalars[name]))))
    for k, v in enumerate(draws.beta.mean(axis=0), start=1):
        rows.append((f"mean_beta_{k}", float(v)))
    lat_path = args.latents or _sibling(args.draws, "latents.csv")
    n = dataset.N
    if lat_path:
        _, lat = read_matrix_with_ids(lat_path)
        draws.b, draws.s, draws.u = lat[None, :, 0], lat[None, :, 1], lat[None, :, 2]
    else:
        draws.b, draws.s, draws.u = np.zeros((1, n)), np.zeros((1, n)), np.ones((1, n))
    for r in diagnostics.residual_report(dataset, draws, basis):
        rows.append((f"resid_{r['stream']}_{r['stat']}", r["value"]))
    buf = io.StringIO()
    buf.write(_inherited_comment(args.draws))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in rows:
        w.writerow([k, _fmt(v) if isinstance(v, float) else v])
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    width = max(len(k) for k, _ in rows)
    for k, v in rows:
        print(f"{k:<{width}}  {v:.6g}" if isinstance(v, float) else f"{k:<{width}}  {v}")
    if chk.skipped:
        print(f"note: {chk.notice}")
    return 0


def read_matrix_with_ids(path):
    rows = _read_rows(path)
    ids = [r[0] for r in rows[1:] if r]
    return ids, np.array([[float(c) for c in r[1:]] for r in rows[1:] if r])


def cmd_export_index(args):
    draws = read_draws(args.draws)
    basis = BasisSpec(draws.xi.shape[1] - 1)
    bands = diagnostics.index_bands(draws.xi, basis, args.grid)
    text = matrix_csv(np.column_stack([bands.x, bands.mean, bands.lower, bands.upper]),
                      ["x", "mean", "lower_2.5", "upper_97.5"], _inherited_comment(args.draws))
    _emit(text, args.out)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="stgp", description="Skew-t single-index mixed model toolkit")
    p.add_argument("--version", action="version", version=f"stgp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--scenario", choices=simlab.SCENARIOS, default="sim1")
    s.add_argument("--n", type=int, default=100, help="subjects (sim1) or population size (sim2, sim3)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=int, default=diagnostics.DEFAULT_GRID)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="run the Gibbs sampler")
    f.add_argument("--data", required=True)
    f.add_argument("--config")
    f.add_argument("--prs", type=int, nargs="?", const=DEFAULT_PRS_J,
                   help=f"pooled WFPBB replicates (default {DEFAULT_PRS_J} when given without a value)")
    f.add_argument("--variant", choices=("st-gp", "sn-gp", "n-gp"))
    f.add_argument("--seed", type=int)
    f.add_argument("--iterations", type=int)
    f.add_argument("--burn-in", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--threads", type=int)
    f.add_argument("--out-dir", required=True)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("resample", help="one WFPBB pseudo-representative resample, as CSV")
    r.add_argument("--data", required=True)
    r.add_argument("--pop-size", type=int)
    r.add_argument("--rescale", action="store_true", help="scale weights to sum to --pop-size")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out")
    r.set_defaults(func=cmd_resample)

    d = sub.add_parser("diagnose", help="WAIC, residual summary and moment self-check")
    d.add_argument("--draws", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--loglik")
    d.add_argument("--latents")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)

    e = sub.add_parser("export-index", help="posterior index function on a grid with 95% bands")
    e.add_argument("--draws", required=True)
    e.add_argument("--grid", type=int, default=diagnostics.DEFAULT_GRID)
    e.add_argument("--out")
    e.set_defaults(func=cmd_export_index)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (StgpError, ValueError, OSError) as exc:
        print(f"stgp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
