# pages/00_Attack_Results.py
from pathlib import Path

import pandas as pd
import plotly.express as px
import streamlit as st
from utils.navbar import navbar
from utils.runs import load_config, load_json, load_records, run_picker

st.set_page_config(page_title="Attack Results", layout="wide")
navbar()

# ---------- Load ----------
run = run_picker("attack", "Attack run")
try:
    df = load_records(run)
    cfg = load_config(run)
    report = load_json(run, "report.json")
    st.caption(f"Loaded **{len(df):,}** records from **{run}**")
except Exception as e:
    st.error(f"Load error: {e}")
    st.stop()

if df.empty:
    st.info("This run attacked no inputs.")
    st.stop()

# ---------- Filters ----------
only_correct = st.sidebar.checkbox("Only correctly classified inputs", value=False)
dfv = df[df["correct"]] if only_correct else df

# ---------- KPIs ----------
success_rate = 100.0 * dfv["success"].mean() if len(dfv) else 0.0
clean_acc = 100.0 * df["correct"].mean()
wins = dfv[dfv["success"]]
median_q = int(wins["queries"].quantile(0.5, interpolation="lower")) if len(wins) else 0

k1, k2, k3, k4, k5 = st.columns(5)
k1.metric("Variant", cfg.get("variant", "?"))
k2.metric("Inputs", f"{len(dfv):,}")
k3.metric("Clean accuracy", f"{clean_acc:.1f}%")
k4.metric("Success rate", f"{success_rate:.1f}%")
k5.metric("Median queries", f"{median_q:,}")

st.caption(f"ε = {float(cfg.get('epsilon', 0)):.4g}, max queries = {cfg.get('max_queries', '?')}, "
           f"population = {cfg.get('population', '?')}, σ = {cfg.get('sigma', '?')}")

# ---------- Query distribution ----------
st.markdown("### Queries to success")
if wins.empty:
    st.info("No successful attacks to plot.")
else:
    fig = px.histogram(wins, x="queries", nbins=30, title="Search queries at success",
                       labels={"queries": "Queries"})
    st.plotly_chart(fig, width='stretch')

    fig = px.histogram(wins, x="linf", nbins=30, title="ℓ∞ distance of successful adversaries",
                       labels={"linf": "ℓ∞ distance"})
    st.plotly_chart(fig, width='stretch')

# ---------- Report ----------
report_txt = Path(run, "report.txt")
if report_txt.exists():
    st.markdown("### Report")
    st.code(report_txt.read_text(encoding="utf-8"), language=None)

# ---------- Records ----------
st.markdown("### Records")
st.dataframe(dfv, hide_index=True)
st.download_button("Download CSV", dfv.to_csv(index=False).encode("utf-8"),
                   file_name=f"{Path(run).name}_records.csv", mime="text/csv")
