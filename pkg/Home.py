import streamlit as st
from utils.runs import RUNS_DIR

st.set_page_config(page_title="Flow Attack Dashboard", layout="wide")

st.sidebar.write(f"Runs — `{RUNS_DIR}`")

# ----- Catalog: path, title, icon
catalog = [
    ("pages/00_Attack_Results.py",  "Attack Results",  "🎯"),
    ("pages/05_Flow_Training.py",   "Flow Training",   "🌊"),
    ("pages/10_Detection.py",       "Detection",       "🔎"),
    ("pages/15_Evaluation.py",      "Evaluation",      "📊"),
]

pages = [st.Page(path, title=title, icon=icon) for path, title, icon in catalog]

nav = st.navigation(pages)

nav.run()

# Sidebar
if st.sidebar.button("Reload runs"):
    st.cache_data.clear()
    st.rerun()
