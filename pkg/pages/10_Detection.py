import pandas as pd
import plotly.express as px
import streamlit as st
from utils.navbar import navbar
from utils.runs import load_config, load_json, run_picker

st.set_page_config(page_title="Detection", layout="wide")
st.title("🔎 Mahalanobis Detection")
navbar()

run = run_picker("detect", "Detection run")
try:
    doc = load_json(run, "detect_report.json")
    cfg = load_config(run)
except Exception as e:
    st.error(f"Failed to load detection report: {e}")
    st.stop()

det = pd.DataFrame(doc.get("detectors", []))
if det.empty:
    st.info("No detectors in this report.")
    st.stop()

st.caption(f"Layers {cfg.get('layers', '-1')}, ridge {cfg.get('ridge', '?')}, "
           f"train fraction {cfg.get('train_fraction', '?')}")

# ---------- Detector table ----------
st.markdown("### Detectors")
cols = ["attack_variant", "auroc", "accuracy", "n_train", "n_eval", "positives", "negatives", "ridge"]
st.dataframe(det[[c for c in cols if c in det.columns]], hide_index=True)

fig = px.bar(det, x="attack_variant", y=["auroc", "accuracy"], barmode="group",
             title="Detection performance per attack (lower is stealthier)",
             labels={"attack_variant": "Attack", "value": "Score", "variable": "Metric"})
fig.update_yaxes(range=[0, 1])
st.plotly_chart(fig, width='stretch')

# ---------- Latent shift ----------
shifts = doc.get("latent_shift", {})
st.markdown("### Latent shift")
if not shifts:
    st.info("No flow was given to this run; latent-shift statistics are unavailable.")
    st.stop()

rows = []
for variant, s in shifts.items():
    for ratio in s["ratios"]:
        rows.append({"attack": variant, "relative shift": ratio})
ratios = pd.DataFrame(rows)

k = st.columns(len(shifts))
for col, (variant, s) in zip(k, shifts.items()):
    col.metric(f"{variant} median", f"{s['median']:.3f}")

fig = px.histogram(ratios, x="relative shift", color="attack", barmode="overlay", nbins=30,
                   opacity=0.6, title="‖f⁻¹(x_adv) − f⁻¹(x)‖ / ‖f⁻¹(x)‖")
st.plotly_chart(fig, width='stretch')
