from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from motionprior_hub import __version__
from motionprior_hub.core.utils import sha256_file, utc_now_iso
from motionprior_hub.infra.storage import read_json, write_json

MANIFEST_FILE = "run_manifest.json"
WALL_CLOCK_FIELDS = ("started_at", "duration_s")


@dataclass
class RunManifest:
    """
    Паспорт запуска: команда, итоговая конфигурация, зерно, контрольные
    суммы входов и список выходов. Только started_at и duration_s зависят
    от времени запуска.
    """

    command: str
    config: dict[str, Any]
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    started_at: str = field(default_factory=utc_now_iso)
    duration_s: float = 0.0
    _t0: float = field(default_factory=time.monotonic, repr=False)

    def add_input(self, path: str | Path) -> None:
        path = Path(path)
        self.inputs[str(path)] = sha256_file(path)

    def add_inputs(self, paths: list[Path]) -> None:
        for path in sorted(paths):
            self.add_input(path)

    def collect_outputs(self, out_dir: Path) -> None:
        """Все файлы внутри каталога вывода, кроме самого паспорта и логов."""
        out_dir = Path(out_dir)
        files = (p for p in out_dir.rglob("*") if p.is_file())
        self.outputs = sorted(
            p.relative_to(out_dir).as_posix()
            for p in files
            if p.name != MANIFEST_FILE and "logs" not in p.relative_to(out_dir).parts
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
            "started_at": self.started_at,
            "duration_s": self.duration_s,
        }

    def write(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        self.collect_outputs(out_dir)
        self.duration_s = round(time.monotonic() - self._t0, 3)
        return write_json(out_dir / MANIFEST_FILE, self.to_dict())


def load_manifest(path: str | Path) -> dict[str, Any]:
    return read_json(Path(path), default={})


def reproducible_view(manifest: dict[str, Any]) -> dict[str, Any]:
    """Паспорт без полей времени для сравнения повторных запусков."""
    return {k: v for k, v in manifest.items() if k not in WALL_CLOCK_FIELDS}
