from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import plotly.express as px
import streamlit as st

from flowattack.flowmodel import load_flow, sample
from utils.runs import load_json, run_picker

# -----------------------------
# Page setup
# -----------------------------
st.set_page_config(page_title="Flow Training", page_icon="🌊", layout="wide")
st.title("🌊 Flow Training")

run = run_picker("flow", "Flow run")


@st.cache_data(show_spinner="Sampling flow…")
def flow_samples(path: str, n: int, seed: int) -> np.ndarray:
    flow = load_flow(Path(path, "flow.ckpt"))
    return sample(flow, n, seed).reshape((n, *flow.input_shape))


try:
    rep = load_json(run, "train_report.json")
except Exception as e:
    st.error(f"Failed to load training report: {e}")
    st.stop()

# -----------------------------
# KPIs
# -----------------------------
k1, k2, k3 = st.columns(3)
k1.metric("Kind", rep.get("kind", "?"))
k2.metric("Input shape", "×".join(str(s) for s in rep.get("input_shape", [])))
if rep.get("untrained"):
    k3.metric("Holdout NLL", "untrained")
else:
    k3.metric("Holdout NLL", f"{rep['holdout_nll'][-1]:.3f}",
              delta=f"{rep['holdout_nll'][-1] - rep['holdout_nll'][0]:.3f}", delta_color="inverse")

# -----------------------------
# Curves
# -----------------------------
if rep.get("epoch_nll"):
    st.markdown("---")
    st.subheader("📉 Negative log-likelihood")
    curves = pd.DataFrame({
        "epoch": np.arange(1, len(rep["epoch_nll"]) + 1),
        "train": rep["epoch_nll"],
        "holdout": rep["holdout_nll"][1:],
    }).melt(id_vars="epoch", var_name="split", value_name="nll")
    fig = px.line(curves, x="epoch", y="nll", color="split", labels={"nll": "NLL (nats)"})
    st.plotly_chart(fig, width='stretch')

    lr = pd.DataFrame({"epoch": np.arange(1, len(rep["lr"]) + 1), "lr": rep["lr"]})
    fig = px.line(lr, x="epoch", y="lr", log_y=True, title="Learning rate")
    st.plotly_chart(fig, width='stretch')

# -----------------------------
# Samples
# -----------------------------
st.markdown("---")
st.subheader("🎲 Samples")
with st.sidebar:
    n = st.number_input("Samples", value=500, min_value=1, max_value=5000)
    seed = st.number_input("Sample seed", value=0, min_value=0)

try:
    xs = flow_samples(run, int(n), int(seed))
except Exception as e:
    st.error(f"Sampling failed: {e}")
    st.stop()

if xs.ndim == 2 and xs.shape[1] == 2:
    fig = px.scatter(pd.DataFrame(xs, columns=["x1", "x2"]), x="x1", y="x2", opacity=0.5)
    st.plotly_chart(fig, width='stretch')
elif xs.ndim >= 3:
    images = (xs if xs.ndim == 3 else xs[:, 0])[:16]
    fig = px.imshow(images, facet_col=0, facet_col_wrap=8, binary_string=True, zmin=0, zmax=1)
    fig.for_each_annotation(lambda a: a.update(text=""))
    st.plotly_chart(fig, width='stretch')
else:
    st.dataframe(pd.DataFrame(xs[:50]))
