"""Streamlit viewer for a ``process`` output directory.

    streamlit run app/streamlit_app.py -- --out path/to/out
"""
import math
import sys
from pathlib import Path
from typing import Any, Dict, List

import streamlit as st

ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from app.occupancy_map import load_map  # noqa: E402
from utilities.pick_list_exporter import load_pick_list  # noqa: E402


def load_outputs(out_dir) -> Dict[str, Any]:
    """Pick list, voxel maps and timing report of one output directory"""
    out = Path(out_dir)
    outputs: Dict[str, Any] = {'pick_list': None, 'maps': {}, 'timing': None}
    pick_path = out / "pick_list.json"
    if pick_path.exists():
        outputs['pick_list'] = load_pick_list(pick_path)
    for path in sorted(out.glob("voxmap_*.txt")):
        outputs['maps'][path.stem[len("voxmap_"):]] = load_map(path)
    timing = out / "timing.txt"
    if timing.exists():
        outputs['timing'] = timing.read_text(encoding="utf-8")
    return outputs


def _deg(value) -> str:
    return f"{math.degrees(value):.1f}" if value is not None else "–"


def pick_rows(pick_list: Dict[str, Any]) -> List[Dict[str, Any]]:
    """Table rows in pick-list order"""
    rows = []
    for rank, f in enumerate(pick_list.get('fruits', []), 1):
        rows.append({
            'rank': rank,
            'id': f['id'],
            'centre (m)': ", ".join(f"{v:.3f}" for v in f['center_m']),
            'radius (mm)': round(f['radius_m'] * 1000, 1),
            'θ (°)': _deg(f['theta_rad']),
            'φ (°)': _deg(f['phi_rad']),
            'L': round(f['confidence'], 3) if f['confidence'] is not None else None,
            'can_pick': f['can_pick'],
            'rejection': f['rejection'] or "",
        })
    return rows


def main(out_dir: str = "out") -> None:
    st.set_page_config(page_title="PickSight - pick list viewer", layout="wide")
    st.title("PickSight - pick list viewer")

    with st.sidebar:
        st.header("Output directory")
        out_dir = st.text_input("Path", value=out_dir)

    outputs = load_outputs(out_dir)
    doc = outputs['pick_list']
    if doc is None:
        st.info(f"No pick_list.json in {out_dir}. Run `python -m app process` first.")
        return

    st.caption(f"frame `{doc['frame_id']}` · config digest `{doc['config_digest']}` · {doc['confidence_model']}")
    rows = pick_rows(doc)
    cols = st.columns(3)
    cols[0].metric("Fruits modelled", len(rows))
    cols[1].metric("Pickable", sum(r['can_pick'] for r in rows))
    cols[2].metric("Rejected", len(doc.get('rejected', [])))

    st.markdown("### Pick list")
    st.dataframe(rows, use_container_width=True)
    if doc.get('rejected'):
        st.markdown("### Rejected")
        st.dataframe(doc['rejected'], use_container_width=True)

    if outputs['maps']:
        st.markdown("### Obstacle maps")
        st.dataframe([{'class': label, 'voxels': len(occ), 'resolution (mm)': occ.resolution * 1000}
                      for label, occ in outputs['maps'].items()], use_container_width=True)
    if outputs['timing']:
        with st.expander("Stage timing", expanded=False):
            st.code(outputs['timing'])


if __name__ == "__main__":
    args = sys.argv[1:]
    main(args[args.index("--out") + 1] if "--out" in args else "out")
