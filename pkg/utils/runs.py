import json
from pathlib import Path

import pandas as pd
import streamlit as st

from flowattack.config import parse_config_text
from flowattack.records import read_records, records_frame

RUNS_DIR = st.secrets.get("RUNS_DIR", "runs")

# marker file -> run kind
KINDS = {
    "results.jsonl": "attack",
    "flow.ckpt": "flow",
    "classifier.ckpt": "classifier",
    "detect_report.json": "detect",
    "evaluation.json": "evaluate",
    "dataset.json": "data",
}


def run_kind(path: Path) -> str | None:
    for marker, kind in KINDS.items():
        if (path / marker).exists():
            return kind
    return None


@st.cache_data(show_spinner=False)
def list_runs(root: str = RUNS_DIR) -> pd.DataFrame:
    """Every directory under ``root`` holding a config.resolved, with its kind."""
    base = Path(root)
    rows = []
    if base.is_dir():
        for cfg in sorted(base.rglob("config.resolved")):
            run = cfg.parent
            rows.append({
                "run": str(run.relative_to(base)),
                "kind": run_kind(run),
                "path": str(run),
                "modified": pd.Timestamp.fromtimestamp(cfg.stat().st_mtime),
            })
    return pd.DataFrame(rows, columns=["run", "kind", "path", "modified"])


def runs_of(kind: str) -> list[str]:
    df = list_runs()
    return df.loc[df["kind"] == kind, "path"].tolist()


@st.cache_data(show_spinner=False)
def load_config(path: str) -> dict:
    return parse_config_text(Path(path, "config.resolved").read_text(encoding="utf-8"), path)


@st.cache_data(show_spinner=False)
def load_json(path: str, name: str) -> dict:
    with open(Path(path, name), encoding="utf-8") as fh:
        return json.load(fh)


@st.cache_data(show_spinner=False)
def load_records(path: str) -> pd.DataFrame:
    return records_frame(read_records(Path(path, "results.jsonl")))


def run_picker(kind: str, label: str, multi: bool = False):
    """Sidebar selector over runs of one kind; stops the page when there are none."""
    paths = runs_of(kind)
    if not paths:
        st.info(f"No {kind} runs found under `{RUNS_DIR}`.")
        st.stop()
    with st.sidebar:
        if multi:
            return st.multiselect(label, paths, default=paths)
        return st.selectbox(label, paths)
