"""Offline/online orchestration and the on-disk artifact store.

Layout under a workspace root::

    samples/<use>.{bin,json}
    datasets/<load>-<use>/{manifest.json,traces.bin,params.bin}
    bases/<load>/{manifest.json,basis.bin}
    models/<load>/{manifest.json,weights.bin,history.json}
    bundle.json
    reports/*.csv

Every manifest is sorted-key JSON without timestamps and records the SHA-256
of its binaries plus a ``key`` hashing the stage inputs. A stage whose
manifest already carries the right key and intact binaries is skipped.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corrector, mlp, rb
from .micro import LatticeConfig, Microstructure, SampleSet, is_stratified, lhs_sample
from .model import DeepBndModel, Submodel

log = logging.getLogger("deepbnd")

LOADS = {"axial": 1, "shear": 3}
USES = ("train", "validation", "test")


class ArtifactError(RuntimeError):
    pass


def default_config() -> dict:
    """Desk-scale configuration."""
    return {
        "lattice": LatticeConfig().to_dict(),
        "geometry": {"n_reduced": 2, "divisions": 8, "order": 1},
        "datasets": {"train": {"n": 256, "seed": 1},
                     "validation": {"n": 64, "seed": 2},
                     "test": {"n": 32, "seed": 3}},
        "n_rb": 8,
        "sweep": [1, 2, 4, 8],
        "train": mlp.TrainConfig().to_dict(),
        "experiments": {
            "cell": {"providers": ["taylor", "linear", "periodic", "minimal", "deepbnd"]},
            "cook": None,
            "bar": None,
        },
    }


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=None) -> dict:
    cfg = default_config()
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text()))
    cfg = _merge(cfg, overrides)
    check_config(cfg)
    return cfg


def check_config(cfg: dict) -> None:
    seeds = {u: cfg["datasets"][u]["seed"] for u in USES if u in cfg["datasets"]}
    tr = seeds.get("train")
    for u in ("validation", "test"):
        if u in seeds and seeds[u] == tr:
            raise ValueError(f"{u} seed must differ from the training seed")
    for u, d in cfg["datasets"].items():
        if d["n"] < 1:
            raise ValueError(f"dataset {u} must be nonempty")
    if cfg["n_rb"] < 1:
        raise ValueError("n_rb must be positive")
    LatticeConfig.from_dict(cfg["lattice"])
    mlp.TrainConfig(**cfg["train"])


def lattice_of(cfg) -> LatticeConfig:
    return LatticeConfig.from_dict(cfg["lattice"])


def geometry_of(cfg) -> corrector.CellGeometry:
    lat = lattice_of(cfg)
    g = cfg["geometry"]
    return _geometry(lat.n_side, g["n_reduced"], g["divisions"], g["order"], lat.length)


_GEOMETRIES = {}


def _geometry(n_side, n_reduced, divisions, order, length) -> corrector.CellGeometry:
    key = (n_side, n_reduced, divisions, order, length)
    if key not in _GEOMETRIES:
        _GEOMETRIES[key] = corrector.CellGeometry(n_side, n_reduced, divisions, order, length)
    return _GEOMETRIES[key]


def digest(obj) -> str:
    if isinstance(obj, (bytes, bytearray)):
        data = bytes(obj)
    else:
        data = json.dumps(obj, sort_keys=True).encode()
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupted manifest ({exc})") from None


def write_bin(path, arr) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_bin(path, shape, sha=None, order="C") -> np.ndarray:
    raw = Path(path).read_bytes()
    if sha is not None and hashlib.sha256(raw).hexdigest() != sha:
        raise ArtifactError(f"{path}: content hash mismatch")
    n = int(np.prod(shape))
    if len(raw) != 8 * n:
        raise ArtifactError(f"{path}: expected {8 * n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape, order=order).copy()


def _fresh(manifest_path, key, binaries) -> bool:
    """True when a stage's manifest matches ``key`` and its binaries are intact."""
    p = Path(manifest_path)
    if not p.exists():
        return False
    man = read_json(p)
    if man.get("key") != key:
        return False
    for name, sha_field in binaries:
        f = p.parent / name
        if not f.exists() or file_digest(f) != man.get(sha_field):
            return False
    return True


def parallel_map(fn, items, workers: int = 1) -> list:
    """Order-preserving map over a bounded process pool."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# --------------------------------------------------------------------------
# offline stages


def stage_samples(cfg, ws: Path) -> dict:
    n_b = lattice_of(cfg).n_balls
    out = {}
    for use, d in cfg["datasets"].items():
        path = ws / "samples" / use
        s = lhs_sample(d["n"], n_b, d["seed"])
        if not is_stratified(s.theta):
            raise ArtifactError(f"sample set {use} is not stratified")
        path.parent.mkdir(parents=True, exist_ok=True)
        s.save(path)
        out[use] = s
    return out


def _snapshot_job(args):
    lat_dict, geo, theta, loads = args
    lat = LatticeConfig.from_dict(lat_dict)
    g = _geometry(lat.n_side, geo["n_reduced"], geo["divisions"], geo["order"], lat.length)
    m = Microstructure.from_theta(lat, theta)
    return np.stack([t.values for t in corrector.goal_traces(m, g, loads)])


def stage_snapshots(cfg, ws: Path, workers: int = 1) -> dict:
    geom = geometry_of(cfg)
    bd = geom.boundary
    lat = lattice_of(cfg)
    result = {}
    for use, d in cfg["datasets"].items():
        samples = SampleSet.load(ws / "samples" / use)
        key = digest({"lattice": cfg["lattice"], "geometry": cfg["geometry"],
                      "samples": digest(samples.theta.tobytes()), "use": use})
        dirs = {name: ws / "datasets" / f"{name}-{use}" for name in LOADS}
        if all(_fresh(dirs[n] / "manifest.json", key,
                      [("traces.bin", "traces_sha256"), ("params.bin", "params_sha256")])
               for n in LOADS):
            log.info("snapshots %s: up to date", use)
            result[use] = dirs
            continue
        log.info("snapshots %s: %d HF solves", use, samples.shape[0])
        jobs = [(cfg["lattice"], cfg["geometry"], t, tuple(LOADS.values())) for t in samples.theta]
        traces = np.stack(parallel_map(_snapshot_job, jobs, workers))   # (n_s, 2, n_gamma)
        radii = np.array([Microstructure.from_theta(lat, t).radii for t in samples.theta])
        for k, (name, idx) in enumerate(LOADS.items()):
            dd = dirs[name]
            tsha = write_bin(dd / "traces.bin", traces[:, k])
            psha = write_bin(dd / "params.bin", radii)
            write_json(dd / "manifest.json", {
                "key": key, "load": name, "load_index": idx, "use": use,
                "n_s": int(samples.shape[0]), "seed": int(samples.seed),
                "n_gamma": int(bd.n_values), "n_b": int(lat.n_balls),
                "mesh_hash": bd.mesh_hash, "ordering": "ccw-bl-interleaved",
                "traces_sha256": tsha, "params_sha256": psha,
            })
        result[use] = dirs
    return result


def load_dataset(directory):
    d = Path(directory)
    man = read_json(d / "manifest.json")
    W = read_bin(d / "traces.bin", (man["n_s"], man["n_gamma"]), man["traces_sha256"])
    P = read_bin(d / "params.bin", (man["n_s"], man["n_b"]), man["params_sha256"])
    return W, P, man


def _n_basis(cfg) -> int:
    return int(max([cfg["n_rb"], *cfg.get("sweep", [])]))


def stage_pod(cfg, ws: Path) -> dict:
    bd = geometry_of(cfg).boundary
    out = {}
    for name, idx in LOADS.items():
        W, _, dman = load_dataset(ws / "datasets" / f"{name}-train")
        if dman["mesh_hash"] != bd.mesh_hash:
            raise ArtifactError(f"dataset {name}-train was built on a different mesh")
        d = ws / "bases" / name
        key = digest({"traces": dman["traces_sha256"], "n": _n_basis(cfg)})
        if not _fresh(d / "manifest.json", key, [("basis.bin", "basis_sha256")]):
            B = rb.pod(W, bd.mass, n_rb=_n_basis(cfg), load=idx, mesh_hash=bd.mesh_hash)
            sha = write_bin(d / "basis.bin", B.basis.T)   # column-major storage
            write_json(d / "manifest.json", {
                "key": key, "n_gamma": B.n_gamma, "n_rb": B.n_rb, "load_index": idx,
                "mesh_hash": bd.mesh_hash, "eigenvalues": [float(v) for v in B.eigenvalues],
                "basis_sha256": sha, "dataset_sha256": dman["traces_sha256"],
            })
        out[name] = load_basis(d, bd)
    return out


def load_basis(directory, bd) -> rb.ReducedBasis:
    d = Path(directory)
    man = read_json(d / "manifest.json")
    if man["mesh_hash"] != bd.mesh_hash or man["n_gamma"] != bd.n_values:
        raise ArtifactError(f"{d}: basis mesh hash {man['mesh_hash']} is incompatible with "
                            f"boundary discretisation {bd.mesh_hash}")
    X = read_bin(d / "basis.bin", (man["n_gamma"], man["n_rb"]), man["basis_sha256"], order="F")
    return rb.ReducedBasis(X, np.asarray(man["eigenvalues"]), bd.mass, man["load_index"],
                           man["mesh_hash"])


def stage_train(cfg, ws: Path) -> dict:
    lat = lattice_of(cfg)
    bd = geometry_of(cfg).boundary
    tcfg = mlp.TrainConfig(**cfg["train"])
    out = {}
    for name in LOADS:
        basis_dir = ws / "bases" / name
        bman = read_json(basis_dir / "manifest.json")
        basis = load_basis(basis_dir, bd).truncate(min(_n_basis(cfg), bman["n_rb"]))
        W, P, tman = load_dataset(ws / "datasets" / f"{name}-train")
        Wv, Pv, vman = load_dataset(ws / "datasets" / f"{name}-validation")
        d = ws / "models" / name
        key = digest({"basis": bman["basis_sha256"], "train": tman["traces_sha256"],
                      "val": vman["traces_sha256"], "cfg": tcfg.to_dict()})
        if not _fresh(d / "manifest.json", key, [("weights.bin", "weights_sha256")]):
            from .micro import theta_from_radii

            x = theta_from_radii(P, lat.r_min, lat.r_max)
            xv = theta_from_radii(Pv, lat.r_min, lat.r_max)
            log.info("training %s network on %d samples", name, x.shape[0])
            net, scaling, hist = mlp.train(x, rb.project(W, basis), xv, rb.project(Wv, basis), tcfg)
            d.mkdir(parents=True, exist_ok=True)
            sha = write_bin(d / "weights.bin", net.flat())
            man = mlp.model_manifest(net, scaling, tcfg, bman["basis_sha256"])
            man.update({"key": key, "weights_sha256": sha, "best_epoch": hist.best_epoch,
                        "best_val_loss": float(min(hist.val_loss))})
            write_json(d / "manifest.json", man)
            write_json(d / "history.json", hist.to_dict())
        out[name] = d
    return out


def stage_bundle(cfg, ws: Path) -> Path:
    geom = geometry_of(cfg)
    entry = {}
    for name in LOADS:
        bman = read_json(ws / "bases" / name / "manifest.json")
        mman = read_json(ws / "models" / name / "manifest.json")
        entry[name] = {"basis": f"bases/{name}", "basis_sha256": bman["basis_sha256"],
                       "model": f"models/{name}", "weights_sha256": mman["weights_sha256"]}
    bundle = {"lattice": cfg["lattice"], "geometry": geom.to_dict(),
              "mesh_hash": geom.boundary.mesh_hash, "n_rb": cfg["n_rb"], "submodels": entry}
    write_json(ws / "bundle.json", bundle)
    return ws / "bundle.json"


def run_offline(cfg: dict, workspace, workers: int = 1) -> Path:
    """Samples, HF snapshots, POD, training and the model bundle."""
    ws = Path(workspace)
    ws.mkdir(parents=True, exist_ok=True)
    write_json(ws / "config.json", cfg)
    stage_samples(cfg, ws)
    stage_snapshots(cfg, ws, workers)
    stage_pod(cfg, ws)
    stage_train(cfg, ws)
    return stage_bundle(cfg, ws)


def load_bundle(path) -> DeepBndModel:
    path = Path(path)
    ws = path.parent if path.is_file() else path
    b = read_json(ws / "bundle.json")
    lat = LatticeConfig.from_dict(b["lattice"])
    g = b["geometry"]
    geom = _geometry(g["n_side"], g["n_reduced"], g["divisions"], g["order"], g["length"])
    bd = geom.boundary
    if b["mesh_hash"] != bd.mesh_hash:
        raise ArtifactError("bundle mesh hash does not match its geometry")
    subs = {}
    for name, e in b["submodels"].items():
        basis = load_basis(ws / e["basis"], bd)
        net, scaling, man = mlp.load_model(ws / e["model"])
        if man["basis_hash"] != e["basis_sha256"]:
            raise ArtifactError(f"model {name} was trained on a different basis")
        n = net.layer_dims[-1]
        subs[name] = Submodel(net, scaling, basis.truncate(n))
    return DeepBndModel(subs["axial"], subs["shear"], lat, bd,
                        {"workspace": str(ws), "n_rb": b["n_rb"]})


# --------------------------------------------------------------------------
# online phase


def _cell_job(args):
    lat_dict, geo, theta, providers, ws = args
    lat = LatticeConfig.from_dict(lat_dict)
    g = _geometry(lat.n_side, geo["n_reduced"], geo["divisions"], geo["order"], lat.length)
    m = Microstructure.from_theta(lat, theta)
    out = {"hf": corrector.hf_window_tangent(m, g)}
    cp = corrector.CellProblem(g.reduced_mesh, m)
    for p in providers:
        if p == "deepbnd":
            from .model import deepbnd_tangent

            out[p] = deepbnd_tangent(_bundle_cache(ws), m.radii, cp)
        else:
            out[p] = cp.tangent(p)
    return out


_BUNDLES = {}


def _bundle_cache(ws):
    if ws not in _BUNDLES:
        _BUNDLES[ws] = load_bundle(ws)
    return _BUNDLES[ws]


def tangent_errors(tangents: list, providers) -> dict:
    """Relative Frobenius errors against the HF tangent, per provider."""
    return {p: np.array([np.linalg.norm(t[p] - t["hf"]) / np.linalg.norm(t["hf"])
                         for t in tangents]) for p in providers}


def sweep_rows(dbm: DeepBndModel, ws: Path, sweep) -> list:
    rows = []
    for name, idx in LOADS.items():
        W, P, _ = load_dataset(ws / "datasets" / f"{name}-test")
        for n in sweep:
            from .model import error_decomposition

            s = error_decomposition(W, P, dbm.truncated(n), idx)
            case = f"{name}/n_rb={n}"
            rows += [(case, "e_pod", s.pod), (case, "e_dnn", s.dnn), (case, "e_total", s.total)]
    return rows


def run_online(cfg: dict, workspace, workers: int = 1) -> dict:
    """Single-cell comparison on the test set, error sweep and optional FE2/DNS runs."""
    from . import macro

    ws = Path(workspace)
    dbm = load_bundle(ws)
    reports = {}
    samples = SampleSet.load(ws / "samples" / "test")
    providers = cfg["experiments"]["cell"]["providers"]
    jobs = [(cfg["lattice"], cfg["geometry"], t, providers, str(ws)) for t in samples.theta]
    tangents = parallel_map(_cell_job, jobs, workers)
    errs = tangent_errors(tangents, providers)
    rows = []
    for p, e in errs.items():
        rows += [(p, "median_rel_frobenius", float(np.median(e))),
                 (p, "mean_rel_frobenius", float(np.mean(e)))]
    # bound ordering on the first test cell
    if "taylor" in providers and "minimal" in providers:
        t = tangents[0]
        gap = np.linalg.eigvalsh(0.5 * ((t["taylor"] - t["minimal"]) + (t["taylor"] - t["minimal"]).T))
        rows.append(("bounds", "taylor_minus_minimal_min_eig", float(gap.min())))
    # oracle path: exact goal traces injected into the reduced problem
    lat, geom = lattice_of(cfg), geometry_of(cfg)
    m = Microstructure.from_theta(lat, samples.theta[0])
    exact = np.column_stack([w.values for w in corrector.goal_traces(m, geom, (1, 2, 3))])
    cp = corrector.CellProblem(geom.reduced_mesh, m)
    C_exact = corrector.reduced_tangent_from_traces(cp, exact)
    C_hf = corrector.hf_window_tangent(m, geom)
    rows.append(("exact_trace", "rel_frobenius", float(np.linalg.norm(C_exact - C_hf) / np.linalg.norm(C_hf))))
    reports["cell"] = rows
    reports["sweep"] = sweep_rows(dbm, ws, sorted(set(cfg.get("sweep", [])) | {cfg["n_rb"]}))
    ex = cfg["experiments"]
    if ex.get("cook"):
        reports["cook"] = cook_experiment(ex["cook"], cfg, dbm, workers)
    if ex.get("bar"):
        reports["bar"] = bar_experiment(ex["bar"], cfg, dbm, workers)
    (ws / "reports").mkdir(parents=True, exist_ok=True)
    for name, r in reports.items():
        (ws / "reports" / f"{name}.csv").write_text(macro.rows_to_csv(r))
    return reports


def cook_experiment(ecfg: dict, cfg: dict, dbm, workers=1) -> list:
    """Random-draw FE2 on the tapered membrane; HF-tangent FE2 is the reference."""
    from . import macro

    lat, geom = lattice_of(cfg), geometry_of(cfg)
    prob = macro.cook_problem(ecfg.get("divisions", 8))
    n_cells = prob.mesh.cells.shape[0]
    pool = macro.random_draw_pool(lat, n_cells, ecfg.get("seed", 11))
    kinds = ecfg.get("providers", ["periodic", "deepbnd"])
    provs = {k: macro.TangentProvider(k, geom, dbm) for k in ["hf", *kinds]}
    rows = []
    errs = {k: [] for k in kinds}
    for r in range(ecfg.get("realisations", 5)):
        assign = macro.random_draw_assignment(pool, n_cells, 1000 + r)
        ref = macro.fe2(prob, assign, provs["hf"], workers)
        uA = ref.displacement_at([prob.probes["A"]])[0]
        for k in kinds:
            sol = macro.fe2(prob, assign, provs[k], workers)
            errs[k].append(float(np.linalg.norm(sol.displacement_at([prob.probes["A"]])[0] - uA)
                                 / np.linalg.norm(uA)))
    for k in kinds:
        rows.append((k, "median_uA_rel_vs_hf", float(np.median(errs[k]))))
    return rows


def bar_experiment(ecfg: dict, cfg: dict, dbm, workers=1) -> list:
    """Clamped bar: DNS reference against sliding-window FE2 solutions."""
    from . import macro

    lat, geom = lattice_of(cfg), geometry_of(cfg)
    ny = ecfg.get("ny", 4)
    nx = 4 * ny
    bar = macro.BarMicrostructure.sample(nx, ny, ecfg.get("seed", 5), lat.gamma)
    ref = macro.dns(bar, ecfg.get("dns_divisions", 8))
    # several macro cells per block keep the macro discretisation error well below
    # the differences between boundary models
    md = ecfg.get("macro_divisions", 4)
    prob = macro.bar_problem((nx * md, ny * md))
    assign = macro.sliding_window_assignment(bar, prob.mesh, lat)
    cands = {}
    for k in ecfg.get("providers", ["periodic", "hf", "deepbnd"]):
        cands[k] = macro.fe2(prob, assign, macro.TangentProvider(k, geom, dbm), workers)
    return macro.error_report(ref, cands, prob.probes)


# --------------------------------------------------------------------------
# validation


@dataclass
class Check:
    name: str
    ok: bool
    message: str = ""


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def add(self, name, ok, message=""):
        self.checks.append(Check(name, bool(ok), message))

    def lines(self):
        return [f"{'PASS' if c.ok else 'FAIL'} {c.name}" + (f": {c.message}" if c.message else "")
                for c in self.checks]


def validate_artifacts(workspace) -> ValidationReport:
    ws = Path(workspace)
    rep = ValidationReport()
    try:
        b = read_json(ws / "bundle.json")
    except (FileNotFoundError, ArtifactError) as exc:
        rep.add("bundle", False, str(exc))
        return rep
    rep.add("bundle", True)
    g = b["geometry"]
    geom = _geometry(g["n_side"], g["n_reduced"], g["divisions"], g["order"], g["length"])
    bd = geom.boundary
    rep.add("bundle mesh hash", b["mesh_hash"] == bd.mesh_hash,
            "" if b["mesh_hash"] == bd.mesh_hash else "bundle geometry changed")
    for d in sorted((ws / "datasets").glob("*")):
        name = f"dataset {d.name}"
        try:
            W, P, man = load_dataset(d)
            ok = man["mesh_hash"] == bd.mesh_hash and np.all(np.isfinite(W))
            rep.add(name, ok, "" if ok else "mesh hash incompatible with the bundle")
        except (ArtifactError, FileNotFoundError, KeyError) as exc:
            rep.add(name, False, str(exc))
    for name, e in b["submodels"].items():
        basis = None
        try:
            bman = read_json(ws / e["basis"] / "manifest.json")
            basis = load_basis(ws / e["basis"], bd)
            ok_hash = bman["basis_sha256"] == e["basis_sha256"]
            rep.add(f"basis {name} hash", ok_hash, "" if ok_hash else "bundle references another basis")
            err = float(np.abs(basis.gram() - np.eye(basis.n_rb)).max()) if basis.n_rb else 0.0
            rep.add(f"basis {name} orthonormal", err < 1e-8, f"max |G - I| = {err:.2e}")
            dpath = ws / "datasets" / f"{name}-train"
            if dpath.exists():
                dman = read_json(dpath / "manifest.json")
                same = dman["mesh_hash"] == bman["mesh_hash"]
                rep.add(f"basis {name} vs traces", same,
                        "" if same else f"incompatible mesh hashes {bman['mesh_hash']} vs {dman['mesh_hash']}")
        except (ArtifactError, FileNotFoundError, KeyError) as exc:
            rep.add(f"basis {name}", False, str(exc))
        try:
            mman = read_json(ws / e["model"] / "manifest.json")
            net, _, _ = mlp.load_model(ws / e["model"])
            ok = True
            msg = ""
            if file_digest(ws / e["model"] / "weights.bin") != mman.get("weights_sha256"):
                ok, msg = False, "weights hash mismatch"
            elif basis is not None and net.layer_dims[-1] > basis.n_rb:
                ok, msg = False, f"network outputs {net.layer_dims[-1]} > basis size {basis.n_rb}"
            elif net.layer_dims[0] != LatticeConfig.from_dict(b["lattice"]).n_balls:
                ok, msg = False, "network input size differs from the lattice size"
            rep.add(f"model {name} dimension chain", ok, msg)
        except (ArtifactError, FileNotFoundError, KeyError, ValueError) as exc:
            rep.add(f"model {name} dimension chain", False, str(exc))
    return rep
