"""Run specifications: a JSON file describing one optimization run end to end
(problem, training hyperparameters, backend, export options). Parsing applies
the reference defaults, rejects unknown keys at every level, and validates
each constraint with a named error."""

import json
from dataclasses import asdict, dataclass, field as dc_field

from . import field as field_mod
from . import mechanics as mech_mod
from . import stylization as style_mod
from . import trainer as trainer_mod

PRESETS = ("mbb", "bridge", "lbracket")


class RunSpecError(ValueError):
    """A run spec failed to parse or validate."""


@dataclass
class ExportOptions:
    png_factor: int = 2  # upsampled export samples the field at factor x style res
    mesh_iso: float = 0.5
    mesh_depth: float = 10.0

    def __post_init__(self):
        if self.png_factor < 1:
            raise RunSpecError(f"png_factor must be >= 1, got {self.png_factor}")
        if not 0.0 < self.mesh_iso < 1.0:
            raise RunSpecError(f"mesh_iso must lie in (0, 1), got {self.mesh_iso}")
        if self.mesh_depth <= 0:
            raise RunSpecError(f"mesh_depth must be positive, got {self.mesh_depth}")


@dataclass
class RunSpec:
    train: trainer_mod.TrainConfig
    problem_preset: str | None = None
    problem_file: str | None = None
    target_fraction: float | None = None  # overrides the preset's default
    backend_url: str | None = None
    output_dir: str = "out"
    export: ExportOptions = dc_field(default_factory=ExportOptions)

    def __post_init__(self):
        if (self.problem_preset is None) == (self.problem_file is None):
            raise RunSpecError("problem must name exactly one of preset or file")
        if self.problem_preset is not None and self.problem_preset not in PRESETS:
            raise RunSpecError(
                f"unknown preset {self.problem_preset!r}; choose from {', '.join(PRESETS)}")
        if self.target_fraction is not None and not 0.0 < self.target_fraction < 1.0:
            raise RunSpecError(
                f"target_fraction must lie in (0, 1), got {self.target_fraction}")
        if self.train.backend == "remote" and not self.backend_url:
            raise RunSpecError("backend 'remote' requires backend_url")


def make_problem(spec: RunSpec) -> mech_mod.FemProblem:
    """Instantiate the mechanics problem the spec refers to."""
    if spec.problem_preset is not None:
        problem = mech_mod.preset_problem(spec.problem_preset, spec.train.fea_resolution)
    else:
        try:
            problem = mech_mod.load_problem(spec.problem_file)
        except FileNotFoundError:
            raise RunSpecError(f"problem file not found: {spec.problem_file}") from None
        if (problem.nelx, problem.nely) != (spec.train.fea_resolution,) * 2:
            raise RunSpecError(
                f"problem mesh {problem.nelx}x{problem.nely} does not match "
                f"fea_resolution {spec.train.fea_resolution}")
    if spec.target_fraction is not None:
        problem.target_fraction = spec.target_fraction
    return problem


def _take(section: dict, context: str, allowed) -> dict:
    if not isinstance(section, dict):
        raise RunSpecError(f"{context} must be a JSON object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise RunSpecError(f"unknown key {unknown[0]!r} in {context}")
    return dict(section)


_TRAIN_KEYS = ("alpha", "beta", "gamma", "iterations", "lr_initial", "lr_final",
               "pool_factor", "fea_resolution", "style_resolution", "prompt",
               "backend", "seed", "alpha_penalty_p", "grayscale_only",
               "ccl_threshold", "ccl_max_iters", "uniform_init", "reproducible")
_GRID_KEYS = ("levels", "table_size", "features", "n_min", "n_max")
_AUGMENT_KEYS = ("batch", "grayscale_prob", "crop_area_range", "rotation_deg",
                 "translate_frac", "scale_range", "blur_sigma", "out_size")
_TOP_KEYS = _TRAIN_KEYS + ("problem", "output_dir", "backend_url", "grid",
                           "augment", "export")
_EXPORT_KEYS = ("png_factor", "mesh_iso", "mesh_depth")
_PROBLEM_KEYS = ("preset", "file", "target_fraction")

_TUPLE_FIELDS = ("crop_area_range", "scale_range")


def parse_run_spec_data(data: dict) -> RunSpec:
    """Validate an already-decoded spec document."""
    top = _take(data, "run spec", _TOP_KEYS)

    problem = _take(top.pop("problem", {}), "problem", _PROBLEM_KEYS)
    grid_args = _take(top.pop("grid", {}), "grid", _GRID_KEYS)
    augment_args = _take(top.pop("augment", {}), "augment", _AUGMENT_KEYS)
    export_args = _take(top.pop("export", {}), "export", _EXPORT_KEYS)
    for key in _TUPLE_FIELDS:
        if key in augment_args:
            augment_args[key] = tuple(augment_args[key])

    train_args = {k: top.pop(k) for k in _TRAIN_KEYS if k in top}
    style = train_args.get("style_resolution", 256)
    pool = train_args.get("pool_factor", 4)
    if "fea_resolution" not in train_args:
        if style % pool:
            raise RunSpecError(
                f"style_resolution {style} is not divisible by pool_factor {pool}")
        train_args["fea_resolution"] = style // pool

    try:
        train = trainer_mod.TrainConfig(
            grid=field_mod.GridConfig(**grid_args),
            augment=style_mod.AugmentSpec(**augment_args),
            **train_args)
        export = ExportOptions(**export_args)
        return RunSpec(
            train=train,
            problem_preset=problem.get("preset"),
            problem_file=problem.get("file"),
            target_fraction=problem.get("target_fraction"),
            backend_url=top.pop("backend_url", None),
            output_dir=top.pop("output_dir", "out"),
            export=export)
    except (ValueError, TypeError) as exc:
        raise RunSpecError(str(exc)) from exc


def parse_run_spec(path) -> RunSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise RunSpecError(f"run spec not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise RunSpecError(f"parse error in {path} at line {exc.lineno}: {exc.msg}") from exc
    return parse_run_spec_data(data)


def run_spec_to_data(spec: RunSpec) -> dict:
    """Inverse of parse_run_spec_data, suitable for json.dump."""
    problem = {}
    if spec.problem_preset is not None:
        problem["preset"] = spec.problem_preset
    if spec.problem_file is not None:
        problem["file"] = spec.problem_file
    if spec.target_fraction is not None:
        problem["target_fraction"] = spec.target_fraction
    train = asdict(spec.train)
    grid = train.pop("grid")
    augment = train.pop("augment")
    augment.pop("rng_seed")  # derived from the run seed, not part of the spec
    for key in _TUPLE_FIELDS:
        augment[key] = list(augment[key])
    data = {"problem": problem, "output_dir": spec.output_dir, **train,
            "grid": grid, "augment": augment, "export": asdict(spec.export)}
    if spec.backend_url is not None:
        data["backend_url"] = spec.backend_url
    return data


def write_run_spec(spec: RunSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(run_spec_to_data(spec), fh, indent=2)
        fh.write("\n")
