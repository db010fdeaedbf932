"""Deterministic JSON / JSONL helpers shared across the pipeline.

Everything written to disk goes through this module so that two runs with
the same config and seed produce byte-identical artifacts: keys are sorted,
floats use Python's shortest round-trip repr, and no timestamps are ever
embedded.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

import torch


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=True, separators=(",", ":"))


def sha256_hex(data: str | bytes) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def mix_seed(*parts: Any) -> int:
    """Derive a stable sub-seed from arbitrary labels (fits in 63 bits)."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def dump_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, ensure_ascii=True, indent=1)
        fh.write("\n")


def load_json(path: str | Path) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def read_jsonl(path: str | Path) -> list[dict]:
    """Parse a JSONL file; malformed lines are reported with their line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON line ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object per line")
            records.append(obj)
    return records


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(canonical_json(rec))
            fh.write("\n")


def tensor_to_lists(t: torch.Tensor) -> list:
    return t.detach().cpu().tolist()


def lists_to_tensor(data: Any) -> torch.Tensor:
    return torch.tensor(data, dtype=torch.float64)


def state_dict_to_payload(state: dict[str, torch.Tensor]) -> dict[str, list]:
    return {name: tensor_to_lists(param) for name, param in state.items()}


def payload_to_state_dict(payload: dict[str, list]) -> dict[str, torch.Tensor]:
    return {name: lists_to_tensor(data) for name, data in payload.items()}
