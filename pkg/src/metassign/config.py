"""Run configuration: one INI document covering generation, solver, model,
and meta-training settings, with defaults matching the reference
hyperparameters. See demos/desk_config.ini for an annotated example."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from .assignment import SolverOptions
from .errors import ConfigError
from .meta import MetaConfig
from .model import GNNHyper
from .scenarios import GenerationConfig, PerturbationParams

_BOOL_STATES = {"1": True, "true": True, "yes": True, "on": True,
                "0": False, "false": False, "no": False, "off": False}


@dataclass(frozen=True)
class ModelSettings:
    """GNNHyper minus the feature widths, which depend on the network."""

    hidden: int = 192
    layers: int = 6
    dropout_p: float = 0.01
    epsilon: float = 1e-6
    output_mask: bool = True
    edge_update: bool = False
    residual: bool = False

    def hyper_for(self, n_zones: int) -> GNNHyper:
        return GNNHyper(node_feature_dim=3 + n_zones, edge_feature_dim=2,
                        hidden=self.hidden, layers=self.layers,
                        dropout_p=self.dropout_p, epsilon=self.epsilon,
                        output_mask=self.output_mask, edge_update=self.edge_update,
                        residual=self.residual)


@dataclass(frozen=True)
class RunConfig:
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    model: ModelSettings = field(default_factory=ModelSettings)
    meta: MetaConfig = field(default_factory=MetaConfig)

    def validate(self) -> "RunConfig":
        gen, meta = self.generation, self.meta
        train_ods = gen.n_ods - gen.n_test_ods
        if meta.k_support + meta.m_query > train_ods:
            raise ConfigError(
                f"k_support + m_query = {meta.k_support + meta.m_query} exceeds "
                f"the {train_ods} training ODs per task")
        if meta.task_batch > gen.n_tasks - gen.n_test_tasks:
            raise ConfigError(
                f"task_batch {meta.task_batch} exceeds the "
                f"{gen.n_tasks - gen.n_test_tasks} training tasks")
        if gen.n_test_ods and meta.k_support >= gen.n_test_ods:
            raise ConfigError(
                f"k_support {meta.k_support} leaves no query ODs out of "
                f"{gen.n_test_ods} test ODs")
        return self


_SECTIONS = {
    "generation": {
        "n_tasks": int, "n_ods": int, "closure_low": float, "closure_high": float,
        "factor_low": float, "factor_high": float, "correlation_length": float,
        "seed": int, "n_test_tasks": int, "n_test_ods": int,
        "degrees_on_open_subgraph": bool, "max_closure_retries": int,
    },
    "solver": {
        "max_iterations": int, "gap_tolerance": float, "method": str,
        "line_search_tolerance": float,
    },
    "model": {
        "hidden": int, "layers": int, "dropout_p": float, "epsilon": float,
        "output_mask": bool, "edge_update": bool, "residual": bool,
    },
    "meta": {
        "alpha": float, "beta": float, "k_support": int, "m_query": int,
        "inner_steps": int, "task_batch": int, "meta_iterations": int,
        "meta_grad_mode": str, "seed": int, "clip_norm": float, "fd_step": float,
    },
}


def _convert(section: str, key: str, raw: str):
    try:
        kind = _SECTIONS[section][key]
    except KeyError:
        known = ", ".join(sorted(_SECTIONS[section]))
        raise ConfigError(
            f"unknown key '{key}' in section [{section}] (known: {known})") from None
    if kind is bool:
        value = _BOOL_STATES.get(raw.strip().lower())
        if value is None:
            raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
        return value
    try:
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: expected {kind.__name__}, got {raw!r}") from None


def load_run_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    """Load an INI run configuration; missing keys keep their defaults.

    ``overrides`` maps "section.key" strings to raw values and wins over the
    file (this backs the CLI's ``--set`` flags).
    """
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            with open(path) as f:
                parser.read_file(f)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from None
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(
                    f"unknown config section [{section}] "
                    f"(known: {', '.join(_SECTIONS)})")
            for key, raw in parser.items(section):
                values[section][key] = _convert(section, key, raw)
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"override '{dotted}' must look like section.key=value")
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        values[section][key] = _convert(section, key, str(raw))

    gen_kwargs = dict(values["generation"])
    perturbation = PerturbationParams(
        factor_low=gen_kwargs.pop("factor_low", 0.15),
        factor_high=gen_kwargs.pop("factor_high", 0.70),
        correlation_length=gen_kwargs.pop("correlation_length", 1.0),
    )
    low = gen_kwargs.pop("closure_low", 0.05)
    high = gen_kwargs.pop("closure_high", 0.30)
    generation = GenerationConfig(closure_fraction_range=(low, high),
                                  od_perturbation=perturbation, **gen_kwargs)
    return RunConfig(
        generation=generation,
        solver=SolverOptions(**values["solver"]),
        model=ModelSettings(**values["model"]),
        meta=MetaConfig(**values["meta"]),
    ).validate()


def config_fields() -> dict[str, dict[str, str]]:
    """Section -> key -> type name; used by the CLI help epilogue."""
    return {section: {key: kind.__name__ for key, kind in keys.items()}
            for section, keys in _SECTIONS.items()}
