"""Run manifests and text/CSV report writers."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seed: int = 0
    version: str = ""
    digests: dict = field(default_factory=dict)

    @classmethod
    def build(cls, command: str, config: dict, seed: int, inputs: Sequence = ()) -> "RunManifest":
        from . import __version__

        digests = {Path(p).name: file_digest(p) for p in inputs if p is not None and Path(p).is_file()}
        return cls(command, dict(config), seed, __version__, digests)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "digests": self.digests,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str) + "\n"

    def comment_lines(self) -> list[str]:
        body = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return [f"# manifest: {body}"]


def csv_text(header: Sequence[str], rows: Sequence[Sequence], manifest: RunManifest | None = None) -> str:
    buf = io.StringIO()
    if manifest is not None:
        for line in manifest.comment_lines():
            buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(path, header, rows, manifest: RunManifest | None = None) -> None:
    Path(path).write_text(csv_text(header, rows, manifest))


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return (rows[0], rows[1:]) if rows else ([], [])


def aligned(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    table = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[c]) for r in table) for c in range(len(header))]
    lines = ["  ".join(cell.rjust(widths[c]) for c, cell in enumerate(r)).rstrip() for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def text_report(title: str, body: str, manifest: RunManifest | None = None) -> str:
    parts = [title, "=" * len(title), body.rstrip()]
    if manifest is not None:
        parts.append("")
        parts.extend(manifest.comment_lines())
    return "\n".join(parts) + "\n"
