"""File formats: datasets, truth records, chains, results CSVs, manifests.

Every file starts with a schema line `#%secr-<kind> v<major>`; readers reject
unknown kinds and major versions.  Floats are written with `repr`, which in
Python 3 is the shortest string that round-trips exactly, so write -> read ->
write is byte-stable.  Bit vectors (z, u) are hex-packed, and float/integer
blocks inside chain rows are base64 of the little-endian raw bytes; both are
lossless.

The manifest is a JSON sidecar (`manifest.json`, one per output directory)
recording the subcommand, seeds, configuration hash, input/output digests and
library versions.  Manifests contain timing fields and are therefore the one
output excluded from byte-identity comparisons.
"""

from __future__ import annotations

import base64
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import (
    CaptureDataset,
    ModelId,
    PriorSpec,
    StateSpace,
    TrapGrid,
    active_param_names,
)
from .simulate import Scenario, TruthRecord

__all__ = [
    "FORMAT_VERSIONS",
    "save_dataset",
    "load_dataset",
    "save_truth",
    "load_truth",
    "save_chain",
    "load_chain",
    "write_csv",
    "read_csv",
    "parse_config_text",
    "load_config",
    "sha256_file",
    "write_manifest",
    "load_manifest",
    "fmt",
]

FORMAT_VERSIONS = {
    "dataset": 1,
    "truth": 1,
    "chain": 1,
    "selections": 1,
    "rmse": 1,
    "correlations": 1,
    "marglik": 1,
    "criteria": 1,
    "scores": 1,
}


def fmt(x) -> str:
    """Lossless, byte-stable text for a float."""
    return repr(float(x))


def _schema_line(kind: str) -> str:
    return f"#%secr-{kind} v{FORMAT_VERSIONS[kind]}"


def _check_schema(line: str, kind: str, path) -> None:
    line = line.strip()
    prefix = f"#%secr-{kind} v"
    if not line.startswith(prefix):
        raise DataError(f"{path}: expected '{prefix}<N>' header, got {line!r}")
    try:
        major = int(line[len(prefix):].split(".")[0])
    except ValueError:
        raise DataError(f"{path}: malformed version in header {line!r}")
    if major != FORMAT_VERSIONS[kind]:
        raise DataError(
            f"{path}: unsupported {kind} format version {major} "
            f"(this reader supports v{FORMAT_VERSIONS[kind]})"
        )


def _b64(arr: np.ndarray, dtype) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode()


def _unb64(text: str, dtype, shape) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(text), dtype=dtype)
    return flat.reshape(shape).copy()


def _hexbits(arr: np.ndarray) -> str:
    return np.packbits(arr.astype(np.uint8)).tobytes().hex()


def _unhexbits(text: str, n: int) -> np.ndarray:
    raw = np.frombuffer(bytes.fromhex(text), dtype=np.uint8)
    return np.unpackbits(raw)[:n].astype(np.uint8)


# -- datasets ---------------------------------------------------------------


def save_dataset(path, data: CaptureDataset) -> None:
    """Write a capture dataset as sparse text records (lossless)."""
    path = Path(path)
    sp = data.statespace
    lines = [_schema_line("dataset")]
    lines.append(f"m {data.n_augmented}")
    lines.append(f"traps {data.n_traps}")
    lines.append(f"occasions {data.n_occasions}")
    lines.append(f"n_full {data.n_full}")
    lines.append(
        "statespace "
        + " ".join(
            fmt(v)
            for v in (sp.x_min, sp.x_max, sp.y_min, sp.y_max, sp.grid_resolution)
        )
    )
    for x, y in data.traps.locations:
        lines.append(f"trap {fmt(x)} {fmt(y)}")
    for i in np.flatnonzero(data.u_obs >= 0):
        lines.append(f"sex {i} {int(data.u_obs[i])}")
    for det, y in ((1, data.y1), (2, data.y2)):
        for i, j, k in zip(*np.nonzero(y)):
            lines.append(f"rec {det} {i} {j} {k}")
    path.write_text("\n".join(lines) + "\n")


def load_dataset(path) -> CaptureDataset:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}")
    if not lines:
        raise DataError(f"{path}: empty file")
    _check_schema(lines[0], "dataset", path)
    meta: dict[str, str] = {}
    traps: list[tuple[float, float]] = []
    sex: list[tuple[int, int]] = []
    recs: list[tuple[int, int, int, int]] = []
    for raw in lines[1:]:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        if key == "trap":
            traps.append((float(rest[0]), float(rest[1])))
        elif key == "sex":
            sex.append((int(rest[0]), int(rest[1])))
        elif key == "rec":
            recs.append(tuple(int(v) for v in rest))
        else:
            meta[key] = " ".join(rest)
    try:
        m = int(meta["m"])
        n_traps = int(meta["traps"])
        k_occ = int(meta["occasions"])
        n_full = int(meta["n_full"])
        sp_vals = [float(v) for v in meta["statespace"].split()]
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: missing or malformed header field ({exc})")
    if len(traps) != n_traps:
        raise DataError(f"{path}: expected {n_traps} trap lines, got {len(traps)}")
    space = StateSpace(*sp_vals[:4], grid_resolution=sp_vals[4])
    y1 = np.zeros((m, n_traps, k_occ), dtype=np.int8)
    y2 = np.zeros((m, n_traps, k_occ), dtype=np.int8)
    for det, i, j, k in recs:
        if det not in (1, 2):
            raise DataError(f"{path}: bad detector index {det}")
        if not (0 <= i < m and 0 <= j < n_traps and 0 <= k < k_occ):
            raise DataError(f"{path}: capture record ({det},{i},{j},{k}) out of range")
        (y1 if det == 1 else y2)[i, j, k] = 1
    u_obs = np.full(m, -1, dtype=np.int8)
    for i, v in sex:
        if not 0 <= i < m or v not in (0, 1):
            raise DataError(f"{path}: bad sex record ({i},{v})")
        u_obs[i] = v
    return CaptureDataset(
        y1=y1,
        y2=y2,
        n_full=n_full,
        u_obs=u_obs,
        traps=TrapGrid(np.asarray(traps, dtype=float)),
        statespace=space,
    )


# -- truth records ------------------------------------------------------------


def save_truth(path, truth: TruthRecord) -> None:
    path = Path(path)
    sc = truth.scenario
    lines = [_schema_line("truth")]
    lines.append(f"scenario {sc.scenario_id}")
    for name in ("omega0", "phi", "sigma_m", "sigma_f"):
        lines.append(f"{name} {fmt(getattr(sc, name))}")
    lines.append(f"n_individuals {truth.n_individuals}")
    lines.append(f"n_male {truth.n_male}")
    lines.append(f"psi_true {fmt(truth.psi_true)}")
    lines.append(f"theta_true {fmt(truth.theta_true)}")
    for i in range(truth.n_individuals):
        lines.append(
            f"ind {i} {fmt(truth.s_true[i, 0])} {fmt(truth.s_true[i, 1])} "
            f"{int(truth.u_true[i])}"
        )
    lines.append("perm " + " ".join(str(int(v)) for v in truth.perm_true))
    path.write_text("\n".join(lines) + "\n")


def load_truth(path) -> TruthRecord:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read truth file {path}: {exc}")
    if not lines:
        raise DataError(f"{path}: empty file")
    _check_schema(lines[0], "truth", path)
    meta: dict[str, str] = {}
    inds: list[tuple[int, float, float, int]] = []
    perm: list[int] = []
    for raw in lines[1:]:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, *rest = line.split()
        if key == "ind":
            inds.append((int(rest[0]), float(rest[1]), float(rest[2]), int(rest[3])))
        elif key == "perm":
            perm = [int(v) for v in rest]
        else:
            meta[key] = " ".join(rest)
    try:
        scenario = Scenario(
            meta["scenario"],
            float(meta["omega0"]),
            float(meta["phi"]),
            float(meta["sigma_m"]),
            float(meta["sigma_f"]),
        )
        n = int(meta["n_individuals"])
        n_male = int(meta["n_male"])
        psi = float(meta["psi_true"])
        theta = float(meta["theta_true"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: missing or malformed truth field ({exc})")
    if len(inds) != n:
        raise DataError(f"{path}: expected {n} ind lines, got {len(inds)}")
    s = np.zeros((n, 2))
    u = np.zeros(n, dtype=np.int8)
    for i, x, y, ui in inds:
        s[i] = (x, y)
        u[i] = ui
    return TruthRecord(
        scenario=scenario,
        n_individuals=n,
        n_male=n_male,
        s_true=s,
        u_true=u,
        perm_true=np.asarray(perm, dtype=np.int64),
        psi_true=psi,
        theta_true=theta,
    )


# -- chains -------------------------------------------------------------------


def save_chain(path, chain) -> None:
    """Columnar chain file: one row per draw; latents compactly encoded."""
    path = Path(path)
    names = active_param_names(chain.model)
    header = [_schema_line("chain")]
    header.append(f"model {chain.model.value}")
    header.append(f"m {chain.n_augmented}")
    header.append(f"seed {chain.seed}")
    header.append(f"n_iter {chain.n_iter}")
    header.append(f"burn_in {chain.burn_in}")
    header.append(f"sigma_upper {fmt(chain.prior.sigma_upper)}")
    for k in sorted(chain.accept):
        header.append(f"accept {k} {fmt(chain.accept[k])}")
    header.append(
        "columns draw,"
        + ",".join(names)
        + ",loglik,logprior,z,u,perm,s,perind"
    )
    with path.open("w") as fh:
        fh.write("\n".join(header) + "\n")
        for d in range(chain.n_draws):
            cells = [str(d)]
            cells += [fmt(chain.params[k][d]) for k in names]
            cells.append(fmt(chain.loglik[d]))
            cells.append(fmt(chain.logprior[d]))
            cells.append(_hexbits(chain.z[d]))
            cells.append(_hexbits(chain.u[d]))
            cells.append(_b64(chain.perm[d], "<i4"))
            cells.append(_b64(chain.s[d], "<f8"))
            cells.append(_b64(chain.perind[d], "<f8"))
            fh.write(",".join(cells) + "\n")


def load_chain(path):
    from .mcmc import Chain

    path = Path(path)
    try:
        with path.open() as fh:
            first = fh.readline()
            _check_schema(first, "chain", path)
            meta: dict[str, str] = {}
            accept: dict[str, float] = {}
            columns: list[str] = []
            for raw in fh:
                line = raw.strip()
                if line.startswith("columns "):
                    columns = line.split(" ", 1)[1].split(",")
                    break
                key, *rest = line.split()
                if key == "accept":
                    accept[rest[0]] = float(rest[1])
                else:
                    meta[key] = " ".join(rest)
            if not columns:
                raise DataError(f"{path}: chain file has no columns line")
            rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot read chain {path}: {exc}")
    try:
        model = ModelId(meta["model"])
        m = int(meta["m"])
        seed = int(meta["seed"])
        n_iter = int(meta["n_iter"])
        burn_in = int(meta["burn_in"])
        prior = PriorSpec(sigma_upper=float(meta["sigma_upper"]))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: missing or malformed chain header ({exc})")
    names = list(active_param_names(model))
    expected = ["draw"] + names + ["loglik", "logprior", "z", "u", "perm", "s", "perind"]
    if columns != expected:
        raise DataError(f"{path}: unexpected chain columns {columns}")
    n = len(rows)
    col = {c: i for i, c in enumerate(columns)}
    params = {k: np.array([float(r[col[k]]) for r in rows]) for k in names}
    loglik = np.array([float(r[col["loglik"]]) for r in rows])
    logprior = np.array([float(r[col["logprior"]]) for r in rows])
    z = np.stack([_unhexbits(r[col["z"]], m) for r in rows]) if n else np.zeros((0, m), np.uint8)
    u = np.stack([_unhexbits(r[col["u"]], m) for r in rows]) if n else np.zeros((0, m), np.uint8)
    perm = (
        np.stack([_unb64(r[col["perm"]], "<i4", (m,)) for r in rows])
        if n
        else np.zeros((0, m), np.int32)
    )
    s = (
        np.stack([_unb64(r[col["s"]], "<f8", (m, 2)) for r in rows])
        if n
        else np.zeros((0, m, 2))
    )
    perind = (
        np.stack([_unb64(r[col["perind"]], "<f8", (m,)) for r in rows])
        if n
        else np.zeros((0, m))
    )
    return Chain(
        model=model,
        prior=prior,
        seed=seed,
        n_iter=n_iter,
        burn_in=burn_in,
        params=params,
        z=z,
        u=u,
        s=s,
        perm=perm.astype(np.int32),
        loglik=loglik,
        logprior=logprior,
        perind=perind,
        accept=accept,
    )


# -- results CSVs ---------------------------------------------------------------


def write_csv(path, kind: str, columns: list[str], rows) -> None:
    """Results table with a schema line; cells must not contain commas."""
    path = Path(path)
    out = [_schema_line(kind), ",".join(columns)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, float):
                cells.append(fmt(v))
            else:
                cells.append(str(v))
        line = ",".join(cells)
        if line.count(",") != len(row) - 1:
            raise ValueError(f"cell containing a comma in row {row!r}")
        out.append(line)
    path.write_text("\n".join(out) + "\n")


def read_csv(path, kind: str):
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")
    if not lines:
        raise DataError(f"{path}: empty file")
    _check_schema(lines[0], kind, path)
    if len(lines) < 2:
        raise DataError(f"{path}: missing column header")
    columns = lines[1].split(",")
    rows = [line.split(",") for line in lines[2:] if line.strip()]
    for r in rows:
        if len(r) != len(columns):
            raise DataError(f"{path}: row width {len(r)} != {len(columns)}")
    return columns, rows


# -- configs ----------------------------------------------------------------------


def parse_config_text(text: str) -> dict[str, str]:
    """`key = value` per line; `#` comments; later keys override earlier."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise DataError(f"config line {lineno}: empty key")
        out[key] = value.strip()
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    try:
        return parse_config_text(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}")


# -- manifests -----------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(
    out_dir,
    subcommand: str,
    seed,
    config_text: str = "",
    inputs: list | None = None,
    outputs: list[str] | None = None,
    wall_time_s: float = 0.0,
    status: str = "ok",
    extra: dict | None = None,
) -> Path:
    """One manifest per output directory; outputs are digested relative paths."""
    out_dir = Path(out_dir)
    import scipy

    from . import __version__

    record = {
        "format": "secr-manifest v1",
        "subcommand": subcommand,
        "created_unix": time.time(),
        "wall_time_s": wall_time_s,
        "seed": seed,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "config_text": config_text,
        "inputs": {str(p): sha256_file(p) for p in (inputs or [])},
        "outputs": {
            name: sha256_file(out_dir / name) for name in (outputs or [])
        },
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "secrsel": __version__,
        },
        "status": status,
    }
    if extra:
        record.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(out_dir) -> dict:
    path = Path(out_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed manifest JSON: {exc}")
