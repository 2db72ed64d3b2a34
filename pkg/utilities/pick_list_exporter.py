"""
🍎 PickSight Pick-List Export
Serializes a frame result into pick_list.json (the hand-off to the centre control)
and a short Markdown summary for humans.
"""

import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional

from app.pose_verification import CONFIDENCE_MODEL

SCHEMA_VERSION = "picksight.pick_list/1"


def _num(value: Any) -> Optional[float]:
    """JSON-safe float (NaN/inf become null)"""
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _vec(values) -> Optional[List[float]]:
    if values is None:
        return None
    return [float(v) for v in values]


def fruit_to_dict(model) -> Dict[str, Any]:
    """One pick-list entry; geometry in metres/radians, centre in the camera frame"""
    pose = model.pose
    diag = model.diagnostics
    return {
        'id': int(model.instance_id),
        'center_m': _vec(model.sphere.center),
        'center_work_m': _vec(model.center_work),
        'radius_m': float(model.sphere.r),
        'theta_rad': _num(pose.theta) if pose else None,
        'phi_rad': _num(pose.phi) if pose else None,
        'R_pose': [_vec(row) for row in pose.R_pose] if pose else None,
        'approach_dir': _vec(model.approach_dir),
        'confidence': _num(model.confidence),
        'can_pick': bool(model.can_pick),
        'rejection': model.rejection,
        'diagnostics': {
            'raw_points': int(diag.get('raw_points', 0)),
            'denoised': int(diag.get('denoised', 0)),
            'candidates': int(diag.get('candidates', 0)),
            'votes': int(diag.get('votes', 0)),
            'window_penalty': _num(diag.get('window_penalty')),
        },
    }


def pick_list_document(result) -> Dict[str, Any]:
    """Full pick_list.json document for a FrameResult"""
    return {
        'schema': SCHEMA_VERSION,
        'frame_id': result.frame_id,
        'config_digest': result.config_digest,
        'confidence_model': CONFIDENCE_MODEL,
        'fruits': [fruit_to_dict(m) for m in result.fruits],
        'rejected': [{'id': int(r.instance_id), 'reason': r.reason} for r in result.rejected],
        'maps': {label: {'resolution_m': occ.resolution, 'voxels': len(occ)}
                 for label, occ in sorted(result.maps.items())},
    }


def write_pick_list(result, path) -> Path:
    """Write pick_list.json; identical results give byte-identical files"""
    path = Path(path)
    text = json.dumps(pick_list_document(result), indent=2, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def load_pick_list(path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def pick_list_markdown(doc: Dict[str, Any]) -> str:
    """Markdown summary of a pick_list.json document"""
    lines = [
        f"# Pick list - frame `{doc['frame_id']}`",
        "",
        f"*config digest `{doc['config_digest']}` · {doc['confidence_model']}*",
        "",
    ]
    fruits = doc.get('fruits', [])
    if fruits:
        lines.append("| # | id | centre (m) | radius (mm) | θ (°) | φ (°) | L | pick |")
        lines.append("|---|----|------------|-------------|-------|-------|---|------|")
        for rank, f in enumerate(fruits, 1):
            centre = ", ".join(f"{v:.3f}" for v in f['center_m'])
            theta = f"{math.degrees(f['theta_rad']):.1f}" if f['theta_rad'] is not None else "–"
            phi = f"{math.degrees(f['phi_rad']):.1f}" if f['phi_rad'] is not None else "–"
            pick = "✅" if f['can_pick'] else "❌"
            lines.append(
                f"| {rank} | {f['id']} | {centre} | {f['radius_m'] * 1000:.1f} | {theta} | {phi} "
                f"| {f['confidence']:.3f} | {pick} |"
            )
    else:
        lines.append("No fruit modelled.")
    if doc.get('rejected'):
        lines.append("")
        lines.append("**Rejected:** " + ", ".join(f"{r['id']} ({r['reason']})" for r in doc['rejected']))
    maps = doc.get('maps', {})
    if maps:
        lines.append("")
        lines.append("**Obstacle maps:** " + ", ".join(
            f"{label} {m['voxels']} voxels @ {m['resolution_m'] * 1000:g} mm" for label, m in maps.items()
        ))
    return "\n".join(lines) + "\n"


def write_summary(result, path) -> Path:
    path = Path(path)
    path.write_text(pick_list_markdown(pick_list_document(result)), encoding="utf-8")
    return path
