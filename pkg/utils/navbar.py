import streamlit as st
from utils.runs import RUNS_DIR, list_runs


def navbar():
    runs = list_runs()
    counts = runs["kind"].value_counts()

    st.subheader(f"📁 Runs in `{RUNS_DIR}`")
    cols = st.columns(4)
    cols[0].metric("Attack runs", f"{counts.get('attack', 0):,}")
    cols[1].metric("Flows", f"{counts.get('flow', 0):,}")
    cols[2].metric("Classifiers", f"{counts.get('classifier', 0):,}")
    cols[3].metric("Reports", f"{counts.get('detect', 0) + counts.get('evaluate', 0):,}")
