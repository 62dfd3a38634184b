"""
MaskLab - Results Portal
Browse grid run logs: top-k tables, rank statistics, charts and the application log.
Run with: streamlit run src/app.py
"""
import os
from collections import deque
from pathlib import Path

import pandas as pd
import streamlit as st

from infrastructure.errors import MaskLabError
from infrastructure.logger import LOG_FILE, log
from infrastructure.run_log import load_manifest, log_digest
from services.analysis.report import BAR_FILE, SCATTER_FILE, emit_report
from services.analysis.ranking import select_top_k
from services.grid import load_records

# ----------------------------------
# CONSTANTS
# ----------------------------------
DEFAULT_RUNS_DIR = "runs"
DEFAULT_K = 3
DEFAULT_RANK_K = 5


#displays the last 20 lines of the log file
def get_last_logs(filename=LOG_FILE, n=20):
    """Efficiently read the last N lines of the log file."""
    if not os.path.exists(filename):
        return [f"Log file not found: {filename}"]
    try:
        with open(filename, "r", encoding="utf-8") as f:
            # deque with maxlen=n automatically keeps only the last n elements
            return list(deque(f, n))
    except OSError as e:
        return [f"Error reading logs: {str(e)}"]


# ----------------------------------
# HELPER FUNCTIONS
# ----------------------------------
def find_log_dirs(root) -> list:
    """Directories under `root` (itself included) that hold a grid manifest."""
    root = Path(root)
    if not root.exists():
        return []
    return sorted({p.parent for p in root.rglob("manifest.json")})


def manifest_frame(log_dir) -> pd.DataFrame:
    """Manifest as a table, one row per run key."""
    manifest = load_manifest(log_dir)
    if not manifest:
        return pd.DataFrame(columns=["run_key", "variant", "drop_rate", "status", "error"])
    df = pd.DataFrame.from_dict(manifest, orient="index").rename_axis("run_key").reset_index()
    return df.sort_values(["variant", "drop_rate"]).reset_index(drop=True)


def color_status(val: str) -> str:
    """Apply color coding based on run status values."""
    val_str = str(val)
    if val_str == "ok":
        return 'background-color: #d4edda; color: #155724'  # Green for success
    elif val_str == "diverged":
        return 'background-color: #f8d7da; color: #721c24'  # Red for divergence
    elif val_str == "config_error":
        return 'background-color: #fff3cd; color: #856404'  # Yellow for skipped
    return ''


# ----------------------------------
# SESSION STATE INITIALIZATION
# ----------------------------------
def init_session_state():
    """Initialize all session state variables."""
    if 'report' not in st.session_state:
        st.session_state.report = None


# ----------------------------------
# UI COMPONENTS
# ----------------------------------
def render_sidebar():
    """Render the sidebar controls."""
    with st.sidebar:
        st.header("📂 Run Logs")
        root = st.text_input("Runs directory", value=DEFAULT_RUNS_DIR)
        log_dirs = find_log_dirs(root)
        log_dir = st.selectbox("Log directory", log_dirs, format_func=str) if log_dirs else None
        if not log_dirs:
            st.info("No grid manifests found under this directory.")

        st.divider()
        st.subheader("Report Settings")
        k = st.slider("Top-k per variant", min_value=1, max_value=10, value=DEFAULT_K)
        rank_k = st.slider("Records per variant for ranking", min_value=2, max_value=10, value=DEFAULT_RANK_K)
        report_btn = st.button("🚀 Build Report", width='stretch', type="primary")

        st.divider()
        with st.sidebar.expander("🛠️ Admin / Debug Tools"):
            st.info("Log Viewer (Last 20 lines)")
            if st.button("📋 Refresh Logs", width='stretch'):
                # This triggers a rerun, and the logs will update below
                pass
            st.code("".join(get_last_logs()), language="log")

        return log_dir, k, rank_k, report_btn


def render_runs(log_dir):
    """Manifest overview and top-k table of one log directory."""
    st.subheader("🧾 1. Runs")
    manifest = manifest_frame(log_dir)
    col1, col2, col3 = st.columns(3)
    with col1:
        st.metric("Runs", len(manifest))
    with col2:
        st.metric("Diverged", int((manifest["status"] == "diverged").sum()) if len(manifest) else 0)
    with col3:
        st.metric("Skipped", int((manifest["status"] == "config_error").sum()) if len(manifest) else 0)
    st.caption(f"Log digest (timing excluded): {log_digest(log_dir)}")
    st.dataframe(manifest.style.map(color_status, subset=["status"]), width='stretch', hide_index=True)


def render_report(result, k):
    """Top-k table, rank statistics and the two SVG charts."""
    st.subheader(f"📊 2. Top-{k} Configurations per Variant")
    topk = pd.read_csv(result.topk_csv)
    st.dataframe(topk, width='stretch', hide_index=True)
    st.download_button(label="📥 Download topk.csv", data=topk.to_csv(index=False),
                       file_name="topk.csv", mime="text/csv", width='stretch')

    st.subheader("🎯 3. Rank Statistics")
    if result.rank_report is None:
        st.warning("Rank statistics need at least 2 variants with 2 usable records each.")
    else:
        r = result.rank_report
        col1, col2, col3 = st.columns(3)
        with col1:
            st.metric("Friedman χ²", f"{r.friedman_chi2:.3f}")
        with col2:
            st.metric("p-value", f"{r.p_value:.2e}")
        with col3:
            st.metric("Kendall's W", f"{r.kendall_w:.3f}")
        st.dataframe(pd.read_csv(result.rank_csv)[["variant", "mean_rank", "pooled_mean_rank"]],
                     width='stretch', hide_index=True)

    st.subheader("📈 4. Charts")
    for name in (BAR_FILE, SCATTER_FILE):
        path = Path(result.topk_csv).parent / name
        if path.exists():
            st.image(path.read_text(encoding="utf-8"), caption=name)


# ----------------------------------
# MAIN APPLICATION
# ----------------------------------
def main():
    """Main application function."""
    st.set_page_config(page_title="MaskLab | Results", layout="wide", page_icon="🧪")
    init_session_state()

    st.title("🧪 MaskLab: Regularizer Results")
    st.markdown("""
    Browse grid runs of the stochastic-mask regularizers. Pick a log directory in the
    sidebar, then build the report to see the best configurations and rank statistics.
    """)

    log_dir, k, rank_k, report_btn = render_sidebar()
    if log_dir is None:
        return
    render_runs(log_dir)

    # ----------------------------------
    # EVENT HANDLERS
    # ----------------------------------
    if report_btn:
        with st.spinner("Building report..."):
            try:
                records = load_records(log_dir)
                log.info(f"[PORTAL] report for {log_dir}: {len(records)} records")
                st.session_state.report = (emit_report(records, Path(log_dir).parent / "report", k, rank_k), k)
                if not select_top_k(records, k):
                    st.warning("No usable records in this log directory.")
            except MaskLabError as e:
                st.error(f"Report failed: {str(e)}")
                st.session_state.report = None
                st.stop()

    if st.session_state.report:
        st.divider()
        render_report(*st.session_state.report)


# ----------------------------------
# APPLICATION ENTRY POINT
# ----------------------------------
if __name__ == "__main__":
    main()
