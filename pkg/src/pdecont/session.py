"""Run configuration, point/branch persistence, and session management.

Point files are self-contained: a text JSON header (format version, problem
name and parameters, inline mesh in the documented text format, scalar state,
settings snapshot) followed by a little-endian float64 binary payload holding
the arrays.  Loading reproduces the continuation state exactly; save-load-save
is bitwise idempotent.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import BifPoint, ContinuationSettings, ContinuationState
from .mesh import Mesh, import_mesh, make_rect_mesh

POINT_MAGIC = "PDECONT-POINT 1"


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, missing input)."""


# -- run configuration -----------------------------------------------------------

_SETTINGS_FIELDS = {f.name: f.type for f in dataclasses.fields(ContinuationSettings)}
_INT_SETTINGS = {"imax", "jsw", "nsteps", "parasw", "neig", "bifchecksw",
                 "spcalcsw", "bisecmax", "amod", "maxt", "ngen", "errchecksw",
                 "smod", "pmod", "mst", "pmimax"}
_STR_SETTINGS = {"nsw"}
_BOOL_SETTINGS = {"pm_parallel"}

_KNOWN_SECTIONS = {
    "run": {"problem", "session", "action"},
    "problem": None,  # free-form problem parameters
    "mesh": {"kind", "lx", "ly", "nx", "ny", "path"},
    "continuation": set(_SETTINGS_FIELDS) | {"lam", "u0", "ds", "xi"},
    "tint": {"h", "nsteps"},
    "swibra": {"ds", "xi"},
    "findbif": {"nchange"},
    "plot": {"what", "component"},
    "meshcheck": {"component"},
    "jaccheck": set(),
}


@dataclass
class RunConfig:
    action: str = ""
    session: str = ""
    problem: str = ""
    params: dict = field(default_factory=dict)
    mesh: dict = field(default_factory=dict)
    continuation: dict = field(default_factory=dict)
    tint: dict = field(default_factory=dict)
    swibra: dict = field(default_factory=dict)
    findbif: dict = field(default_factory=dict)
    plot: dict = field(default_factory=dict)
    meshcheck: dict = field(default_factory=dict)
    from_point: str = ""


def _convert(section, key, raw):
    raw = raw.strip()
    if section == "continuation":
        if key in _STR_SETTINGS or key == "u0":
            return raw
        if key in _BOOL_SETTINGS:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
        if key in _INT_SETTINGS:
            try:
                return int(raw)
            except ValueError:
                raise ConfigError(f"[{section}] {key}: expected an integer, "
                                  f"got {raw!r}") from None
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key}: expected a number, "
                              f"got {raw!r}") from None
    if section == "mesh" and key in ("kind", "path"):
        return raw
    if section == "plot" and key == "what":
        return raw
    if section == "run":
        return raw
    if section in ("tint", "findbif", "meshcheck", "plot") and key in (
            "nsteps", "nchange", "component"):
        return int(raw)
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {raw!r}") \
            from None


def parse_config(path):
    """Read the INI-style run configuration; unknown sections/keys rejected."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    cfg = RunConfig()
    for section in cp.sections():
        if section not in _KNOWN_SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        allowed = _KNOWN_SECTIONS[section]
        for key, raw in cp.items(section):
            if allowed is not None and key not in allowed:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            value = _convert(section, key, raw)
            if section == "run":
                if key == "problem":
                    cfg.problem = value
                elif key == "session":
                    cfg.session = value
                elif key == "action":
                    cfg.action = value
            elif section == "problem":
                cfg.params[key] = value
            else:
                getattr(cfg, section if section != "continuation"
                        else "continuation")[key] = value
    return cfg


def mesh_from_config(cfg):
    spec = cfg.mesh
    kind = spec.get("kind", "rect")
    if kind == "rect":
        if not {"lx", "ly", "nx", "ny"} <= set(spec):
            return None  # fall back to the preset default mesh
        return make_rect_mesh(spec["lx"], spec["ly"], int(spec["nx"]),
                              int(spec["ny"]))
    if kind == "import":
        if "path" not in spec:
            raise ConfigError("[mesh] kind=import requires path")
        return import_mesh(spec["path"])
    raise ConfigError(f"unknown mesh kind {spec.get('kind')!r}")


# -- point files -----------------------------------------------------------------

def _mesh_text(mesh):
    buf = io.StringIO()
    buf.write(f"{mesh.n_points} {mesh.n_triangles} {mesh.n_edges}\n")
    for x, y in mesh.points:
        buf.write(f"{float(x)!r} {float(y)!r}\n")
    for i, j, k in mesh.triangles:
        buf.write(f"{i + 1} {j + 1} {k + 1}\n")
    for a, b, lbl in mesh.edges:
        buf.write(f"{a + 1} {b + 1} {lbl}\n")
    return buf.getvalue()


def _mesh_from_text(text):
    tokens = text.split()
    n_p, n_t, n_e = (int(t) for t in tokens[:3])
    pos = 3
    pts = np.array(tokens[pos:pos + 2 * n_p], dtype=float).reshape(n_p, 2)
    pos += 2 * n_p
    tris = np.array(tokens[pos:pos + 3 * n_t], dtype=int).reshape(n_t, 3) - 1
    pos += 3 * n_t
    edges = np.array(tokens[pos:pos + 3 * n_e], dtype=int).reshape(n_e, 3)
    edges[:, :2] -= 1
    return Mesh(pts, edges, tris)


def _spectral_payload(spec):
    if spec is None:
        return None
    return {"re": [float(v) for v in spec.eigenvalues.real],
            "im": [float(v) for v in spec.eigenvalues.imag],
            "neg_count": int(spec.neg_count),
            "window_warning": bool(spec.window_warning)}


def _write_point(path, header, arrays):
    header = dict(header)
    header["arrays"] = [[name, int(arr.size)] for name, arr in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write((POINT_MAGIC + "\n").encode())
        fh.write((str(len(blob)) + "\n").encode())
        fh.write(blob.encode())
        for _name, arr in arrays:
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def _read_point(path):
    with open(path, "rb") as fh:
        magic = fh.readline().decode().strip()
        if magic != POINT_MAGIC:
            raise ConfigError(f"{path}: not a point file (bad magic {magic!r})")
        try:
            hlen = int(fh.readline().decode().strip())
            header = json.loads(fh.read(hlen).decode())
        except (ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: corrupt header: {exc}") from exc
        arrays = {}
        for name, size in header["arrays"]:
            raw = fh.read(8 * size)
            if len(raw) != 8 * size:
                raise ConfigError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").copy()
    return header, arrays


def save_point(path, state, bif=None):
    """Persist the complete continuation state (and optionally BifPoint data)."""
    header = {
        "version": 1,
        "problem": state.problem_name,
        "params": state.problem_params,
        "neq": state.u.size // state.mesh.n_points,
        "lam": float(state.lam),
        "ds": float(state.ds),
        "xi": float(state.xi),
        "step": int(state.step),
        "err": None if state.err is None else float(state.err),
        "mesh": _mesh_text(state.mesh),
        "settings": dataclasses.asdict(state.settings),
        "spectral": _spectral_payload(state.spectral),
        "restart": bool(state.restart or state.tau is None),
    }
    arrays = [("u", state.u)]
    tau = state.tau if state.tau is not None else np.zeros(0)
    arrays.append(("tau", tau))
    if bif is not None:
        header["bif"] = {
            "lam": float(bif.lam),
            "bracket": [float(bif.bracket[0]), float(bif.bracket[1])],
            "alpha0": bif.alpha0, "alpha1": bif.alpha1, "a1": bif.a1,
            "b1": bif.b1, "abar1": bif.abar1,
            "degenerate": bool(bif.degenerate), "note": bif.note,
        }
        for name, arr in (("phi1", bif.phi1), ("psi1", bif.psi1),
                          ("tau1", bif.tau1)):
            if arr is not None:
                arrays.append((name, arr))
    _write_point(path, header, arrays)


def load_point(path):
    """Materialize a ContinuationState (and BifPoint if stored) from disk."""
    header, arrays = _read_point(path)
    if header.get("version") != 1:
        raise ConfigError(f"{path}: unsupported point-file version "
                          f"{header.get('version')!r}")
    mesh = _mesh_from_text(header["mesh"])
    settings = ContinuationSettings(**header["settings"])
    tau = arrays["tau"] if arrays["tau"].size else None
    state = ContinuationState(
        mesh=mesh, u=arrays["u"], lam=header["lam"], settings=settings,
        tau=tau, ds=header["ds"], xi=header["xi"],
        restart=bool(header.get("restart", tau is None)),
        step=int(header.get("step", 0)),
        problem_name=header.get("problem", ""),
        problem_params=header.get("params", {}),
    )
    state.err = header.get("err")
    spec = header.get("spectral")
    if spec is not None:
        from .linalg import SpectralData
        vals = np.array(spec["re"], dtype=float) + 1j * np.array(spec["im"],
                                                                 dtype=float)
        state.spectral = SpectralData(vals, int(spec["neg_count"]),
                                      bool(spec["window_warning"]))
    bif = None
    if "bif" in header:
        b = header["bif"]
        bif = BifPoint(
            u=arrays["u"], lam=b["lam"], mesh=mesh,
            bracket=tuple(b.get("bracket", (b["lam"], b["lam"]))),
            phi1=arrays.get("phi1"), psi1=arrays.get("psi1"),
            tau1=arrays.get("tau1"),
            alpha0=b.get("alpha0"), alpha1=b.get("alpha1"), a1=b.get("a1"),
            b1=b.get("b1"), abar1=b.get("abar1"),
            degenerate=bool(b.get("degenerate", False)),
            note=b.get("note", ""),
        )
    return state, bif


# -- branch files -----------------------------------------------------------------

class BranchWriter:
    """Append-only comma-separated branch file with a '#'-prefixed header."""

    def __init__(self, path, n_out=2):
        self.path = Path(path)
        self.n_out = n_out
        self._fh = None

    def _ensure(self, record):
        if self._fh is not None:
            return
        self.n_out = len(record.out)
        cols = ["step", "lam", "ds", "nneg", "err", "bif"]
        cols += [f"out{k + 1}" for k in range(self.n_out)]
        self._fh = open(self.path, "w")
        self._fh.write("# " + ",".join(cols) + "\n")

    def append(self, record):
        self._ensure(record)
        vals = [str(record.step), repr(float(record.lam)),
                repr(float(record.ds)),
                "" if record.neg_count is None else str(record.neg_count),
                "" if record.err is None else repr(float(record.err)),
                "1" if record.is_bif else "0"]
        vals += [repr(float(v)) for v in record.out]
        self._fh.write(",".join(vals) + "\n")
        self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_branch(path):
    """Branch file as a dict of column arrays."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ConfigError(f"{path}: missing '#' header row")
        cols = [c.strip() for c in header[1:].strip().split(",")]
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise ConfigError(f"{path}: row with {len(parts)} fields, "
                                  f"expected {len(cols)}")
            rows.append([float(p) if p else np.nan for p in parts])
    data = np.array(rows, dtype=float).reshape(-1, len(cols))
    return {c: data[:, k] for k, c in enumerate(cols)}


# -- session ------------------------------------------------------------------------

class SessionWriter:
    """Owns a session directory: lock file, log, branch file, point files."""

    def __init__(self, directory, echo=True):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.lock_path = self.dir / ".lock"
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
        except FileExistsError:
            raise ConfigError(f"session directory {self.dir} is locked "
                              f"(remove {self.lock_path} if stale)") from None
        self.echo = echo
        self.branch = BranchWriter(self.dir / "branch.csv")
        self._log_fh = open(self.dir / "run.log", "a")
        self._header_printed = False

    # reporter protocol -----------------------------------------------------------
    def log(self, msg):
        self._log_fh.write(msg + "\n")
        self._log_fh.flush()
        if self.echo:
            print(msg)

    def accepted(self, state, record):
        if not self._header_printed:
            self.log(f"{'step':>5} {'lam':>12} {'|u|_inf':>10} {'res':>9} "
                     f"{'it':>3} {'ds':>9} {'nneg':>4}")
            self._header_printed = True
        self.branch.append(record)
        res = f"{record.res:.2e}" if record.res is not None else "-"
        it = str(record.iters) if record.iters is not None else "-"
        nneg = str(record.neg_count) if record.neg_count is not None else "-"
        tag = "  <- bifurcation" if record.is_bif else ""
        self.log(f"{record.step:>5} {record.lam:>12.6f} {record.out[0]:>10.4g} "
                 f"{res:>9} {it:>3} {record.ds:>9.3g} {nneg:>4}{tag}")
        smod = state.settings.smod
        if smod > 0 and not record.is_bif and record.step % smod == 0:
            save_point(self.dir / f"p{record.step}.pt", state)
        pmod = state.settings.pmod
        if pmod > 0 and not record.is_bif and record.step % pmod == 0:
            from .plots import plot_solution_state
            plot_solution_state(state, self.dir / f"sol_p{record.step}.svg")

    def bifurcation(self, state, bif, index):
        path = self.dir / f"bp{index}.pt"
        snap = dataclasses.replace(state)
        snap.u, snap.lam = bif.u, bif.lam
        snap.tau = None
        save_point(path, snap, bif=bif)
        self.log(f"saved bifurcation point {path.name} (lam={bif.lam:.6g})")

    def finalize(self, state=None):
        if state is not None:
            save_point(self.dir / f"p{state.step}.pt", state)
        self.branch.close()
        self._log_fh.close()
        if self.lock_path.exists():
            self.lock_path.unlink()

    def abort(self, state=None):
        """Keep partial artifacts on numerical failure."""
        try:
            if state is not None:
                save_point(self.dir / "p_failed.pt", state)
        finally:
            self.finalize()


# -- meshcheck --------------------------------------------------------------------

@dataclass
class MeshCheckReport:
    u_diff_inf: float
    rel_error: float
    n_triangles_old: int
    n_triangles_new: int

    def __str__(self):
        return (f"meshcheck: {self.n_triangles_old} -> {self.n_triangles_new} "
                f"triangles, |u_diff|_inf = {self.u_diff_inf:.4e}, "
                f"relative error = {self.rel_error:.4e}")


def meshcheck(state, problem):
    """Refine to roughly twice the triangles, re-solve at fixed lam, and
    compare against the interpolated old solution.

    Returns (report, refined state, u_diff on the new mesh).
    """
    from .engine import corrector_natural, errcheck
    from .mesh import mark_by_error, refine

    est = errcheck(problem, state.mesh, state.u, state.lam)
    marked = mark_by_error(est, "budget", maxt=2 * state.mesh.n_triangles)
    if marked.size == 0:
        marked = np.arange(state.mesh.n_triangles)
    new_mesh, rmap = refine(state.mesh, marked)
    u_interp = rmap.interpolate(state.u)
    corr = corrector_natural(problem, new_mesh, state.settings, u_interp,
                             state.lam, None, 0.0, state.xi,
                             imax=2 * state.settings.imax)
    if not corr.converged:
        from .engine import ConvergenceError
        raise ConvergenceError("meshcheck: re-solve on the refined mesh "
                               "did not converge")
    ud = corr.u - u_interp
    denom = max(float(np.abs(corr.u).max()), 1e-300)
    report = MeshCheckReport(
        u_diff_inf=float(np.abs(ud).max()),
        rel_error=float(np.abs(ud).max()) / denom,
        n_triangles_old=state.mesh.n_triangles,
        n_triangles_new=new_mesh.n_triangles,
    )
    new_state = dataclasses.replace(state)
    new_state.mesh = new_mesh
    new_state.u = corr.u
    new_state.tau = None
    new_state.restart = True
    new_state.branch = list(state.branch)
    new_state.bifpoints = list(state.bifpoints)
    return report, new_state, ud
