from pathlib import Path

import pandas as pd
import plotly.express as px
import streamlit as st
from utils.navbar import navbar
from utils.runs import load_json, run_picker

st.set_page_config(page_title="Evaluation", page_icon="📊", layout="wide")
st.title("📊 Evaluation")
navbar()

run = run_picker("evaluate", "Evaluation run")
try:
    doc = load_json(run, "evaluation.json")
except Exception as e:
    st.error(f"Failed to load evaluation: {e}")
    st.stop()

# -----------------------------
# Query statistics
# -----------------------------
st.markdown("---")
st.subheader("🔢 Success rate and queries")
summary = pd.DataFrame.from_dict(doc.get("variants", {}), orient="index")
summary.index.name = "variant"
st.dataframe(summary)
common = doc.get("mutually_successful")
st.caption(f"Mutually successful inputs: {doc.get('n_mutually_successful', 0)}"
           + ("" if isinstance(common, list) else f" ({common})"))

txt = Path(run, "evaluation.txt")
if txt.exists():
    with st.expander("Text report"):
        st.code(txt.read_text(encoding="utf-8"), language=None)

# -----------------------------
# Success versus budget
# -----------------------------
curve = pd.DataFrame.from_dict(doc.get("success_curve", {}), orient="index")
if not curve.empty:
    st.markdown("---")
    st.subheader("📈 Success rate within budget")
    curve.index = curve.index.astype(int)
    long = curve.rename_axis("budget").reset_index().melt(id_vars="budget", var_name="variant",
                                                         value_name="success (%)")
    fig = px.line(long, x="budget", y="success (%)", color="variant", markers=True, log_x=True)
    st.plotly_chart(fig, width='stretch')

# -----------------------------
# Transferability
# -----------------------------
transfer = doc.get("transfer")
if transfer:
    st.markdown("---")
    st.subheader("🔁 Transferability (%)")
    matrix = pd.DataFrame.from_dict(transfer, orient="index")
    fig = px.imshow(matrix, text_auto=".1f", color_continuous_scale="Blues", zmin=0, zmax=100,
                    labels={"x": "target", "y": "source", "color": "%"})
    st.plotly_chart(fig, width='stretch')

# -----------------------------
# Flow checks
# -----------------------------
lemma = doc.get("lemma1")
if lemma:
    st.markdown("---")
    st.subheader("🧮 First-order check of the latent map")
    lt = pd.DataFrame(lemma)
    if "scale" in lt.columns:
        ok = lt.dropna(subset=["scale"])
        fig = px.line(ok, x="scale", y="error", color=ok["point"].astype(str), markers=True,
                      log_x=True, log_y=True, labels={"color": "input"})
        st.plotly_chart(fig, width='stretch')
    st.dataframe(lt, hide_index=True)

cov = doc.get("covariance")
if cov:
    st.markdown("---")
    st.subheader("🔗 Perturbation correlation")
    if cov.get("status") != "ok":
        st.info(cov.get("status"))
    else:
        c1, c2, c3 = st.columns(3)
        c1.metric(f"{cov['flow_variant']} mean |corr|", f"{cov['advflow_mean_abs_corr']:.3f}")
        c2.metric("nattack mean |corr|", f"{cov['nattack_mean_abs_corr']:.3f}")
        c3.metric("Ratio", f"{cov['ratio']:.2f}×")
