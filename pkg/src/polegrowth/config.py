"""INI run configuration layered over the packaged defaults."""

from __future__ import annotations

import configparser
import hashlib
import io
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from polegrowth.estimator import EstimationConfig, SmoothingKernel, make_kernel
from polegrowth.model import ModelParams, ParameterError, params_from_config
from polegrowth.pde import GridSpec, grid_for
from polegrowth.simulator import RootLaw


class ConfigReadError(OSError):
    """The configuration file is missing, unreadable or not valid INI."""


def default_text() -> str:
    return resources.files("polegrowth").joinpath("data/default.cfg").read_text()


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]


@dataclass
class RunConfig:
    parser: configparser.ConfigParser

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[str, dict[str, str]] | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        parser.read_string(default_text(), source="<defaults>")
        if path is not None:
            try:
                text = Path(path).read_text()
                parser.read_string(text, source=str(path))
            except (OSError, UnicodeDecodeError, configparser.Error) as exc:
                raise ConfigReadError(f"cannot read config {path}: {exc}") from exc
        for section, items in (overrides or {}).items():
            for key, value in items.items():
                parser[section][key] = str(value)
        return cls(parser)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        parser.read_string(default_text(), source="<defaults>")
        parser.read_string(text)
        return cls(parser)

    def text(self) -> str:
        """Canonical text of the merged configuration."""
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()

    def sha256(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def section(self, name: str):
        return self.parser[name]

    def get(self, section: str, key: str) -> str:
        try:
            return self.parser[section][key]
        except KeyError:
            raise ParameterError(f"missing key {section}.{key}") from None

    def get_float(self, section: str, key: str) -> float:
        try:
            return float(self.get(section, key))
        except ValueError:
            raise ParameterError(f"{section}.{key} is not a number") from None

    def get_int(self, section: str, key: str) -> int:
        try:
            return int(float(self.get(section, key)))
        except ValueError:
            raise ParameterError(f"{section}.{key} is not an integer") from None

    def get_floats(self, section: str, key: str) -> list[float]:
        try:
            return _floats(self.get(section, key))
        except ValueError:
            raise ParameterError(f"{section}.{key} is not a list of numbers") from None

    @property
    def seed(self) -> int:
        return self.get_int("run", "seed")

    def set_seed(self, seed: int) -> None:
        self.parser["run"]["seed"] = str(int(seed))

    @property
    def out_dir(self) -> Path:
        return Path(self.get("output", "dir"))

    def set_out_dir(self, path) -> None:
        self.parser["output"]["dir"] = str(path)

    # -- typed views ---------------------------------------------------------

    def params(self) -> ModelParams:
        return params_from_config(self.section("model"))

    def root(self) -> RootLaw:
        root = RootLaw(self.get_float("root", "x0"), self.get_float("root", "v0"),
                       self.get_int("root", "p0"), self.get_float("root", "log_sigma"))
        if root.x0 <= 0 or root.log_sigma < 0 or root.p0 not in (0, 1):
            raise ParameterError("root needs x0 > 0, log_sigma >= 0 and p0 in {0, 1}")
        return root

    def grid(self, params: ModelParams | None = None) -> GridSpec:
        params = params or self.params()
        return grid_for(params, self.root(), self.get_float("grid", "x_lo"), self.get_float("grid", "x_hi"),
                        self.get_int("grid", "n_x"), self.get_int("grid", "n_v"))

    def dt(self) -> float | None:
        text = self.get("grid", "dt").strip()
        return None if text in ("", "auto") else self.get_float("grid", "dt")

    def estimation(self) -> EstimationConfig:
        e = self.section("estimator")
        h = e.get("h", "").strip()
        varpi = e.get("varpi", "log").strip()
        c0 = e.get("c0", "").strip()
        try:
            return EstimationConfig.on_interval(
                float(e["y_lo"]), float(e["y_hi"]), int(e["n_y"]),
                h=float(h) if h else None,
                c0=float(c0) if c0 else None,
                s=float(e.get("s", "2")),
                varpi=None if varpi == "log" else float(varpi),
            )
        except (KeyError, ValueError) as exc:
            raise ParameterError(f"bad estimator section: {exc}") from None

    def kernel(self) -> SmoothingKernel:
        return make_kernel(self.get("estimator", "kernel.shape"), self.get_int("estimator", "kernel.n0"))

    def validate(self) -> None:
        """Build every typed view so that errors surface before any work."""
        params = self.params()
        self.root()
        grid = self.grid(params)
        dt = self.dt()
        if dt is not None and dt > grid.max_dt(float(grid.nodes.max())):
            raise ParameterError("grid.dt violates the CFL bound")
        if self.get_float("grid", "t_max") <= 0 or self.get_float("run", "t_max") <= 0:
            raise ParameterError("t_max must be positive")
        for key in ("n_rep", "n_cap"):
            if self.get_int("run", key) < 1:
                raise ParameterError(f"run.{key} must be positive")
        times = self.get_floats("run", "times")
        if any(t < 0 for t in times) or sorted(times) != times:
            raise ParameterError("run.times must be nonnegative and sorted")
        h_grid = self.get_floats("run", "lemma1.h_grid")
        if any(h <= 0 for h in h_grid) or sorted(h_grid, reverse=True) != h_grid:
            raise ParameterError("run.lemma1.h_grid must be positive and decreasing")
        if self.get_int("run", "chain.n_steps") // max(self.get_int("run", "chain.n_chains"), 1) <= self.get_int("run", "chain.burn_in"):
            raise ParameterError("chain.n_steps / chain.n_chains must exceed chain.burn_in")
        if not math.isfinite(self.get_float("compare", "tolerance")):
            raise ParameterError("compare.tolerance must be finite")
        self.estimation()
        self.kernel()
