import logging
from pathlib import Path

import pandas as pd

logger = logging.getLogger(__name__)


def write_table(df: pd.DataFrame, path: str | Path, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = " ".join(f"{k}={meta[k]}" for k in sorted(meta))
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# {header}\n")
        df.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    logger.info("Table saved to %s (%d rows)", path, len(df))


def read_table(path: str | Path) -> tuple[pd.DataFrame, dict]:
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    meta = {}
    has_header = first.startswith("#")
    if has_header:
        for token in first[1:].split():
            key, _, value = token.partition("=")
            meta[key] = value
    df = pd.read_csv(path, skiprows=1 if has_header else 0)
    return df, meta
