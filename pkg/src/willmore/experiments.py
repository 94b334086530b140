"""Experiment driver: config parsing and the train / validate / flow /
inpaint / export commands.

Configs are TOML (key/value with nested tables); every experiment from the
validation and application sections ships as a checked-in file under
configs/.  Command-line overrides use dotted keys (grid.n=128).

Validation error curves report the physical L2(Omega) distance to the
analytic circle evolution, averaged over the radius family
r_i = 0.05 pi + 0.15 pi i / num_radii.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import phase_field as pf
from .grid import GridSpec, NodalField, discrete_l2_dist
from .neural import (
    NeuralMcfOperator,
    TrainingConfig,
    apply_operator,
    load_checkpoint,
    save_checkpoint,
    train_progressive_with_history,
)
from .reference import (
    AllenCahnStepConfig,
    ImplicitMcfOperator,
    SemiImplicitMcfOperator,
    circle_radius_mcf,
    circle_radius_willmore,
    mbo_like_step,
    mcf_implicit_step,
    mcf_semi_implicit_step,
)
from .solver import WillmoreConfig, mask_from_shape, run_flow
from .storage import (
    field_from_csv,
    field_to_csv,
    field_to_pgm,
    load_field,
    save_field,
    write_csv,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_shape",
    "figure_radii",
    "cmd_train",
    "cmd_validate_mcf",
    "cmd_validate_willmore",
    "cmd_flow",
    "cmd_inpaint",
    "cmd_export",
]


class ConfigError(Exception):
    """Invalid or inconsistent experiment configuration."""


def _parse_toml_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text  # bare strings are allowed in overrides


def apply_override(data: dict, dotted: str, value):
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {k} is not a table")
    node[keys[-1]] = value


def load_config(path, overrides=()) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not of the form key=value")
        key, _, raw = ov.partition("=")
        apply_override(data, key.strip(), _parse_toml_value(raw.strip()))
    return data


@dataclass
class ExperimentConfig:
    """Typed view over the parsed config dictionary."""

    data: dict
    path: str = "<config>"

    @property
    def kind(self) -> str:
        return str(self._require(["experiment", "kind"]))

    @property
    def seed(self) -> int:
        return int(self.data.get("experiment", {}).get("seed", 0))

    @property
    def output_dir(self) -> Path:
        out = self.data.get("experiment", {}).get("output_dir", "out")
        return Path(out)

    def _require(self, keys: list[str]):
        node = self.data
        for k in keys:
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"{self.path}: missing key {'.'.join(keys)}")
            node = node[k]
        return node

    def section(self, name: str, required: bool = True) -> dict:
        sec = self.data.get(name)
        if sec is None:
            if required:
                raise ConfigError(f"{self.path}: missing [{name}] section")
            return {}
        if not isinstance(sec, dict):
            raise ConfigError(f"{self.path}: [{name}] must be a table")
        return sec

    def grid(self) -> GridSpec:
        g = self.section("grid")
        try:
            return GridSpec(
                int(g.get("d", 2)),
                int(self._require(["grid", "n"])),
                tuple(g.get("origin", (0.0,))),
                float(g.get("edge_length", 1.0)),
            )
        except ValueError as exc:
            raise ConfigError(f"{self.path}: bad grid: {exc}") from exc

    def phase(self) -> tuple[float, float, float]:
        """(epsilon, tau, tau_tilde); tau falls back to tau_tilde."""
        p = self.section("phase")
        eps = float(self._require(["phase", "epsilon"]))
        tau_tilde = float(self._require(["phase", "tau_tilde"]))
        tau = float(p.get("tau", tau_tilde))
        return eps, tau, tau_tilde

    def solver_config(self, mask: NodalField | None = None) -> WillmoreConfig:
        eps, tau, tau_tilde = self.phase()
        s = self.section("solver", required=False)
        try:
            return WillmoreConfig(
                tau=tau,
                tau_tilde=tau_tilde,
                eps=eps,
                newton_grad_tol=float(s.get("newton_grad_tol", 1e-8)),
                newton_max_iter=int(s.get("newton_max_iter", 50)),
                cg_rel_tol=float(s.get("cg_rel_tol", 1e-6)),
                cg_max_iter=int(s.get("cg_max_iter", 500)),
                armijo_c1=float(s.get("armijo_c1", 1e-4)),
                armijo_shrink=float(s.get("armijo_shrink", 0.5)),
                armijo_max_backtracks=int(s.get("armijo_max_backtracks", 30)),
                hessian_mode=str(s.get("hessian_mode", "full")),
                precond=str(s.get("precond", "none")),
                mask=mask,
            )
        except ValueError as exc:
            raise ConfigError(f"{self.path}: bad solver config: {exc}") from exc

    def allen_cahn_config(self) -> AllenCahnStepConfig:
        eps, _tau, tau_tilde = self.phase()
        s = self.section("solver", required=False)
        return AllenCahnStepConfig(
            eps=eps,
            tau_tilde=tau_tilde,
            newton_tol=float(s.get("inner_newton_tol", 1e-9)),
            newton_max_iter=int(s.get("inner_newton_max_iter", 50)),
            cg_rel_tol=float(s.get("inner_cg_rel_tol", 1e-10)),
            cg_max_iter=int(s.get("inner_cg_max_iter", 500)),
        )


# ---------------------------------------------------------------------------
# Shapes from config tables.


def parse_shape(spec: dict) -> pf.Shape:
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError("shape table needs a 'kind' key")
    kind = spec["kind"]
    try:
        if kind in ("sphere", "circle"):
            return pf.Sphere(tuple(spec["center"]), float(spec["radius"]))
        if kind in ("box", "rectangle"):
            return pf.Box(tuple(spec["center"]), tuple(spec["half_extents"]))
        if kind == "cube":
            return pf.cube(tuple(spec["center"]), float(spec["half_width"]))
        if kind == "thick-disk":
            return pf.ThickDisk(
                tuple(spec["center"]),
                float(spec["radius"]),
                float(spec["thickness"]),
                int(spec.get("axis", 2)),
            )
        if kind == "cross":
            return pf.Cross(
                tuple(spec["center"]),
                float(spec["arm_half_length"]),
                float(spec["arm_half_width"]),
            )
        if kind in ("capsule", "tube"):
            return pf.Capsule(tuple(spec["p0"]), tuple(spec["p1"]), float(spec["radius"]))
        if kind == "tube-union":
            segments = [(tuple(s[0]), tuple(s[1])) for s in spec["segments"]]
            return pf.tube_union(segments, float(spec["radius"]))
        if kind == "half-space":
            return pf.HalfSpace(tuple(spec["normal"]), float(spec["offset"]))
        if kind == "union":
            return pf.Union(*[parse_shape(s) for s in spec["shapes"]])
        if kind == "intersection":
            return pf.Intersection(*[parse_shape(s) for s in spec["shapes"]])
        if kind in ("difference", "cut"):
            return pf.Difference(parse_shape(spec["base"]), parse_shape(spec["cutter"]))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad {kind!r} shape: {exc}") from exc
    raise ConfigError(f"unknown shape kind {kind!r}")


def figure_radii(num: int = 30) -> np.ndarray:
    """Radius family 0.05 pi + 0.15 pi i / num, i = 0 .. num-1."""
    i = np.arange(num)
    return 0.05 * np.pi + 0.15 * np.pi * i / num


def _physical_error(a: NodalField, b: NodalField) -> float:
    return float(np.sqrt(a.spec.volume)) * discrete_l2_dist(a, b)


def _domain_center(spec: GridSpec) -> tuple[float, ...]:
    return tuple(o + 0.5 * spec.edge_length for o in spec.origin)


def _ensure_outdir(cfg: ExperimentConfig, override=None) -> Path:
    out = Path(override) if override else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# train


def cmd_train(cfg: ExperimentConfig, output_dir=None) -> dict[int, Path]:
    """Progressive training; one checkpoint and loss CSV per ladder rung."""
    out = _ensure_outdir(cfg, output_dir)
    grid = cfg.grid()
    eps, _tau, tau_tilde = cfg.phase()
    t = cfg.section("train")
    resolutions = tuple(int(n) for n in t.get("resolutions", (grid.n,)))
    kernel_widths = t.get("kernel_widths")
    if kernel_widths is not None:
        kernel_widths = tuple(int(k) for k in kernel_widths)
    loss_target = t.get("loss_target")
    if isinstance(loss_target, list):
        loss_target = tuple(float(x) for x in loss_target)
    elif loss_target is not None:
        loss_target = float(loss_target)
    try:
        tcfg = TrainingConfig(
            m=int(t.get("m", 100)),
            r_min=float(t.get("r_min", 0.05)),
            r_max=float(t.get("r_max", 0.4)),
            batch_size=int(t.get("batch_size", 10)),
            learning_rate=t.get("learning_rate", 1e-3),
            lr_decay=float(t.get("lr_decay", 1.0)),
            lr_decay_every=int(t.get("lr_decay_every", 0)),
            iterations=t.get("iterations", 20000),
            seed=cfg.seed,
            loss_target=loss_target,
            holdout_count=int(t.get("holdout_count", 16)),
            holdout_every=int(t.get("holdout_every", 200)),
            kernel_widths=kernel_widths,
        )
    except ValueError as exc:
        raise ConfigError(f"{cfg.path}: bad training config: {exc}") from exc

    results = train_progressive_with_history(tcfg, grid, eps, tau_tilde, resolutions)
    paths: dict[int, Path] = {}
    for n, res in results.items():
        ckpt = out / f"operator_n{n}.wnet"
        save_checkpoint(res.operator, ckpt)
        paths[n] = ckpt
        write_csv(
            out / f"loss_n{n}.csv",
            ["iteration", "loss"],
            [(i + 1, float(l)) for i, l in enumerate(res.minibatch_losses)],
        )
        write_csv(
            out / f"holdout_n{n}.csv",
            ["iteration", "holdout_loss"],
            [(i, float(l)) for i, l in res.holdout_history],
        )
        print(
            f"rung n={n}: {res.iterations_run} iterations, "
            f"held-out loss {res.final_holdout_loss:.3e}, {res.elapsed:.1f}s"
        )
    return paths


# ---------------------------------------------------------------------------
# validate-mcf


def _mcf_stepper(method: str, cfg: ExperimentConfig, operator: NeuralMcfOperator | None):
    ac = cfg.allen_cahn_config()
    if method == "neural":
        if operator is None:
            raise ConfigError("method 'neural' needs a checkpoint")
        return lambda u: apply_operator(operator, u)
    if method == "semi-implicit":
        return lambda u: mcf_semi_implicit_step(u, ac)
    if method == "implicit":
        return lambda u: mcf_implicit_step(u, ac)
    if method == "mbo":
        return lambda u: mbo_like_step(u, ac)
    raise ConfigError(f"unknown mcf method {method!r}")


def _load_operator_if_needed(cfg: ExperimentConfig, methods, needs: tuple[str, ...]):
    v = cfg.section("validate", required=False)
    if any(m in needs for m in methods):
        ckpt = v.get("checkpoint") or cfg.data.get("flow", {}).get("checkpoint")
        if not ckpt:
            raise ConfigError("validate.checkpoint is required for neural/hybrid methods")
        if not Path(ckpt).exists():
            raise ConfigError(f"checkpoint not found: {ckpt}")
        return load_checkpoint(ckpt)
    return None


def cmd_validate_mcf(cfg: ExperimentConfig, output_dir=None) -> Path:
    """Average circle-family error along time for each one-step method."""
    out = _ensure_outdir(cfg, output_dir)
    grid = cfg.grid()
    eps, _tau, tau_tilde = cfg.phase()
    v = cfg.section("validate")
    steps = int(v.get("steps", 64))
    num_radii = int(v.get("num_radii", 30))
    methods = list(v.get("methods", ["neural", "semi-implicit", "implicit"]))
    operator = _load_operator_if_needed(cfg, methods, ("neural",))
    radii = figure_radii(num_radii)
    center = _domain_center(grid)

    final_time = steps * tau_tilde
    for r in radii:
        circle_radius_mcf(float(r), final_time, grid.d)  # raises on extinction

    errors = {m: np.zeros(steps + 1) for m in methods}
    for method in methods:
        stepper = _mcf_stepper(method, cfg, operator)
        for r in radii:
            u = pf.sphere_phase_field(grid, float(r), center, eps)
            for k in range(1, steps + 1):
                u = stepper(u)
                target = pf.sphere_phase_field(
                    grid, circle_radius_mcf(float(r), k * tau_tilde, grid.d), center, eps
                )
                errors[method][k] += _physical_error(u, target)
        errors[method] /= num_radii

    rows = []
    for method in methods:
        for k in range(steps + 1):
            rows.append((k, method, float(errors[method][k])))
    path = out / "mcf_errors.csv"
    write_csv(path, ["step", "method", "error_l2"], rows)
    return path


# ---------------------------------------------------------------------------
# validate-willmore


def _willmore_inner(method: str, cfg: ExperimentConfig, operator):
    if method in ("hybrid", "neural"):
        if operator is None:
            raise ConfigError("hybrid method needs a checkpoint")
        return operator
    if method in ("nested-semi-implicit", "semi-implicit"):
        return SemiImplicitMcfOperator(cfg.allen_cahn_config())
    if method in ("nested-implicit", "implicit"):
        return ImplicitMcfOperator(cfg.allen_cahn_config())
    raise ConfigError(f"unknown willmore method {method!r}")


def _evolve_willmore(u: NodalField, steps: int, inner, wcfg: WillmoreConfig, per_step=None):
    from .solver import newton_cg_step

    for k in range(1, steps + 1):
        u, diag = newton_cg_step(u, inner, wcfg)
        if per_step is not None:
            per_step(k, u, diag)
    return u


def cmd_validate_willmore(cfg: ExperimentConfig, output_dir=None) -> Path:
    out = _ensure_outdir(cfg, output_dir)
    v = cfg.section("validate")
    mode = v.get("mode", "circles")
    if mode == "circles":
        return _validate_willmore_circles(cfg, out)
    if mode == "rectangle":
        return _validate_willmore_rectangle(cfg, out)
    raise ConfigError(f"unknown validate mode {mode!r}")


def _validate_willmore_circles(cfg: ExperimentConfig, out: Path) -> Path:
    grid = cfg.grid()
    eps, tau, _tt = cfg.phase()
    v = cfg.section("validate")
    steps = int(v.get("steps", 64))
    num_radii = int(v.get("num_radii", 30))
    methods = list(v.get("methods", ["hybrid", "nested-semi-implicit"]))
    operator = _load_operator_if_needed(cfg, methods, ("hybrid", "neural"))
    radii = figure_radii(num_radii)
    center = _domain_center(grid)
    wcfg = cfg.solver_config()

    errors = {m: np.zeros(steps + 1) for m in methods}
    for method in methods:
        inner = _willmore_inner(method, cfg, operator)
        for r in radii:
            u = pf.sphere_phase_field(grid, float(r), center, eps)
            errs = errors[method]

            def track(k, field, diag, r=r, errs=errs):
                target = pf.sphere_phase_field(
                    grid, circle_radius_willmore(float(r), k * tau), center, eps
                )
                errs[k] += _physical_error(field, target)

            _evolve_willmore(u, steps, inner, wcfg, per_step=track)
        errors[method] /= num_radii

    rows = []
    for method in methods:
        for k in range(steps + 1):
            rows.append((k, method, float(errors[method][k])))
    path = out / "willmore_errors.csv"
    write_csv(path, ["step", "method", "error_l2"], rows)
    return path


def _validate_willmore_rectangle(cfg: ExperimentConfig, out: Path) -> Path:
    """Rectangle evolution vs a finer implicit nested reference run."""
    grid = cfg.grid()
    eps, tau, _tt = cfg.phase()
    v = cfg.section("validate")
    steps = int(v.get("steps", 16))
    methods = list(v.get("methods", ["hybrid"]))
    n_ref = int(v.get("reference_n", 2 * grid.n))
    if n_ref % grid.n != 0:
        raise ConfigError("reference_n must be a multiple of grid.n")
    operator = _load_operator_if_needed(cfg, methods, ("hybrid", "neural"))
    shape = parse_shape(cfg.section("shape"))
    wcfg = cfg.solver_config()

    ref_grid = grid.with_n(n_ref)
    ref_inner = ImplicitMcfOperator(cfg.allen_cahn_config())
    stride = n_ref // grid.n
    ref_fields: list[np.ndarray] = []
    u_ref = pf.phase_field_from_shape(ref_grid, shape, eps)
    ref_fields.append(u_ref.as_grid()[(slice(None, None, stride),) * grid.d].reshape(-1))
    _evolve_willmore(
        u_ref,
        steps,
        ref_inner,
        wcfg,
        per_step=lambda k, f, d: ref_fields.append(
            f.as_grid()[(slice(None, None, stride),) * grid.d].reshape(-1)
        ),
    )

    rows = []
    for method in methods:
        inner = _willmore_inner(method, cfg, operator)
        u = pf.phase_field_from_shape(grid, shape, eps)
        errs = [_physical_error(u, NodalField(grid, ref_fields[0]))]

        def track(k, field, diag):
            errs.append(_physical_error(field, NodalField(grid, ref_fields[k])))

        _evolve_willmore(u, steps, inner, wcfg, per_step=track)
        rows.extend((k, method, float(e)) for k, e in enumerate(errs))

    path = out / "willmore_rectangle_errors.csv"
    write_csv(path, ["step", "method", "error_l2"], rows)
    return path


# ---------------------------------------------------------------------------
# flow and inpaint


def _initial_field(cfg: ExperimentConfig, grid: GridSpec, eps: float, section: str) -> NodalField:
    sec = cfg.section(section, required=False)
    path = sec.get("initial_field")
    if path:
        field = load_field(path)
        if field.spec != grid:
            raise ConfigError(f"{path}: field grid does not match [grid]")
        return field
    return pf.phase_field_from_shape(grid, parse_shape(cfg.section("shape")), eps)


def _flow_inner(cfg: ExperimentConfig, section: str):
    sec = cfg.section(section, required=False)
    inner_kind = sec.get("inner", "neural")
    if inner_kind == "neural":
        ckpt = sec.get("checkpoint")
        if not ckpt:
            raise ConfigError(f"[{section}].checkpoint required for the neural inner operator")
        if not Path(ckpt).exists():
            raise ConfigError(f"checkpoint not found: {ckpt}")
        return load_checkpoint(ckpt)
    return _willmore_inner(inner_kind, cfg, None)


def _run_flow_command(cfg: ExperimentConfig, out: Path, section: str, mask: NodalField | None):
    grid = cfg.grid()
    eps, _tau, _tt = cfg.phase()
    sec = cfg.section(section)
    steps = int(sec.get("steps", 1))
    snapshots = set(int(s) for s in sec.get("snapshot_steps", [0, steps]))
    inner = _flow_inner(cfg, section)
    wcfg = cfg.solver_config(mask=mask)
    u0 = _initial_field(cfg, grid, eps, section)

    diag_rows = []
    audit_rows = []
    frozen = None
    if mask is not None:
        frozen = mask.values == 0.0

    def sink(k, field, diag):
        if k in snapshots:
            save_field(field, out / f"field_{k:06d}.wfld")
            field_to_pgm(field, out / f"field_{k:06d}.pgm")
        diag_rows.append(
            (
                k,
                float(diag.energy),
                float(diag.proxy),
                int(diag.newton_iterations),
                int(diag.cg_iterations),
                float(diag.wall_time),
            )
        )
        if frozen is not None:
            changed = int(np.count_nonzero(field.values[frozen] != u0.values[frozen]))
            audit_rows.append((k, changed))

    run_flow(u0, steps, inner, wcfg, sink=sink, store_fields=False)
    write_csv(
        out / "flow_diagnostics.csv",
        ["step", "energy", "willmore_proxy", "newton_iterations", "cg_iterations", "wall_time"],
        diag_rows,
    )
    if mask is not None:
        write_csv(out / "mask_audit.csv", ["step", "changed_outside_mask"], audit_rows)
        field_to_pgm(
            NodalField(grid, 2.0 * mask.values - 1.0), out / "mask.pgm"
        )
    return out


def cmd_flow(cfg: ExperimentConfig, output_dir=None) -> Path:
    """Plain flow: snapshots, images, and a per-step diagnostics CSV."""
    out = _ensure_outdir(cfg, output_dir)
    return _run_flow_command(cfg, out, "flow", mask=None)


def cmd_inpaint(cfg: ExperimentConfig, output_dir=None) -> Path:
    """Masked restoration flow with a frozen-node audit trail."""
    out = _ensure_outdir(cfg, output_dir)
    grid = cfg.grid()
    ip = cfg.section("inpaint")
    mask_path = ip.get("mask_field")
    if mask_path:
        mask = load_field(mask_path)
        if mask.spec != grid:
            raise ConfigError(f"{mask_path}: mask grid does not match [grid]")
    else:
        if "mask_shape" not in ip:
            raise ConfigError("[inpaint] needs mask_shape or mask_field")
        mask = mask_from_shape(grid, parse_shape(ip["mask_shape"]))
    return _run_flow_command(cfg, out, "inpaint", mask=mask)


# ---------------------------------------------------------------------------
# export


def cmd_export(path_in, path_out, slice_axis: int | None = None, slice_index: int | None = None) -> None:
    """Convert WFLD <-> CSV and WFLD -> PGM based on file extensions."""
    src = Path(path_in)
    dst = Path(path_out)
    if not src.exists():
        raise ConfigError(f"input not found: {src}")
    suffix_in = src.suffix.lower()
    suffix_out = dst.suffix.lower()
    if suffix_in == ".csv":
        field = field_from_csv(src)
    else:
        field = load_field(src)
    if suffix_out == ".csv":
        field_to_csv(field, dst)
    elif suffix_out == ".pgm":
        field_to_pgm(field, dst, slice_axis=slice_axis, slice_index=slice_index)
    elif suffix_out in (".wfld", ".bin"):
        save_field(field, dst)
    else:
        raise ConfigError(f"unknown output format {suffix_out!r} (use .csv, .pgm or .wfld)")
