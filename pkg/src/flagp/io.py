"""File formats: CSV matrices, input ranges, the ``flagp-v1`` model bundle and run manifests.

CSV files carry a header row. Simulator and field outputs are stored one run
per row (M x d_y) and transposed to d_y x M on load.
"""

from __future__ import annotations

import csv
import io
import json
import platform
import zipfile
from pathlib import Path

import numpy as np
import scipy

from .basis import BasisModel
from .dataset import DataError, Standardization
from .emulator import EmulatorConfig, FlaGPModel, build_component

BUNDLE_FORMAT = "flagp-v1"
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path, header, rows) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != len(header):
        raise ValueError("header length does not match column count")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix; malformed cells raise DataError with line and column."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} columns, found {len(row)}")
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{line_no}:{col}: not a number: {cell!r}") from None
                if not np.isfinite(v):
                    raise DataError(f"{path}:{line_no}:{col}: non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header, np.asarray(rows)


def read_outputs(path) -> np.ndarray:
    """Row-per-run output CSV as a d_y x runs matrix."""
    return read_csv(path)[1].T


def write_outputs(path, Z, prefix: str = "y") -> None:
    Z = np.atleast_2d(Z)
    write_csv(path, [f"{prefix}{k + 1}" for k in range(Z.shape[0])], Z.T)


def read_ranges(path):
    """``[{"name", "lo", "hi"}, ...]`` as ``(names, ranges)``."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read ranges {path}: {exc}") from exc
    try:
        names = tuple(str(d["name"]) for d in data)
        ranges = tuple((float(d["lo"]), float(d["hi"])) for d in data)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: each range needs name, lo and hi") from exc
    if any(lo >= hi for lo, hi in ranges):
        raise DataError(f"{path}: every range needs lo < hi")
    return names, ranges


def write_ranges(path, names, ranges) -> None:
    write_json(path, [{"name": n, "lo": lo, "hi": hi} for n, (lo, hi) in zip(names, ranges)])


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def versions() -> dict:
    from . import __version__

    return {"flagp": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def write_manifest(path, command: str, config_digest: str, seed: int, extra: dict | None = None) -> None:
    write_json(path, {"command": command, "config_sha256": config_digest, "seed": seed, "versions": versions(), **(extra or {})})


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


def _blob(a) -> bytes:
    return np.asarray(a, dtype="<f8").tobytes(order="F")


def _unblob(raw: bytes, shape) -> np.ndarray:
    return np.frombuffer(raw, dtype="<f8").reshape(shape, order="F").astype(float)


def save_model(model: FlaGPModel, path) -> None:
    """Zip holding ``manifest.json`` plus little-endian float64 column-major arrays."""
    std = model.standardization
    arrays = {
        "X": model.X,
        "B": model.basis.B,
        "W": model.basis.W,
        "singular_values": model.basis.singular_values,
        "std_mean": std.mean,
        "std_scale": np.atleast_1d(std.scale),
    }
    for j, comp in enumerate(model.components):
        arrays[f"lengthscales_{j}"] = comp.lengthscales
    manifest = {
        "format": BUNDLE_FORMAT,
        "shapes": {k: list(np.shape(v)) for k, v in arrays.items()},
        "p": model.p,
        "var_explained": model.basis.var_explained,
        "scalar_scale": np.ndim(std.scale) == 0,
        "nuggets": [c.nugget for c in model.components],
        "input_ranges": [list(r) for r in model.input_ranges],
        "names": list(model.names),
        "config": model.config.to_dict(),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in [("manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())] + [
            (f"{k}.f8", _blob(v)) for k, v in arrays.items()
        ]:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            zf.writestr(info, payload)


def load_model(path) -> FlaGPModel:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"cannot open model bundle {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise DataError(f"{path}: missing manifest.json") from None
        if manifest.get("format") != BUNDLE_FORMAT:
            raise DataError(f"{path}: unsupported bundle format {manifest.get('format')!r}")
        arr = {k: _unblob(zf.read(f"{k}.f8"), tuple(s)) for k, s in manifest["shapes"].items()}
    scale = float(arr["std_scale"][0]) if manifest["scalar_scale"] else arr["std_scale"]
    p = manifest["p"]
    basis = BasisModel(B=arr["B"], W=arr["W"], singular_values=arr["singular_values"], p=p, var_explained=manifest["var_explained"])
    comps = tuple(build_component(arr["X"], arr["W"][j], arr[f"lengthscales_{j}"], manifest["nuggets"][j]) for j in range(p))
    return FlaGPModel(
        basis=basis,
        components=comps,
        standardization=Standardization(mean=arr["std_mean"], scale=scale),
        X=arr["X"],
        input_ranges=tuple(tuple(r) for r in manifest["input_ranges"]),
        names=tuple(manifest["names"]),
        config=EmulatorConfig.from_dict(manifest["config"]),
    )


def posterior_rows(posterior, t_ranges):
    """Posterior table with theta in natural units: iteration, theta..., sigma2, log_post, accepted."""
    lo = np.array([r[0] for r in t_ranges])
    hi = np.array([r[1] for r in t_ranges])
    theta = lo + posterior.theta * (hi - lo)
    it = np.arange(1, len(posterior.sigma2) + 1)
    return np.column_stack([it, theta, posterior.sigma2, posterior.log_post, posterior.accepted.astype(float)])


def write_posterior(path, posterior, t_names, t_ranges) -> None:
    rows = posterior_rows(posterior, t_ranges)
    header = ["iteration", *t_names, "sigma2", "log_post", "accepted"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([str(int(r[0])), *(_fmt(v) for v in r[1:-1]), str(int(r[-1]))])
    Path(path).write_text(buf.getvalue())
