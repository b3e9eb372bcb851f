"""Report figures rendered next to the delimited outputs: per-episode
trajectory sheets for export bundles and latency histograms for the script
client. PNGs carry no metadata so identical inputs render identical bytes."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import protocol
from .store import FRAMES_LOG, _raw_lines, read_manifest_dir


def _load_frames(episode_dir):
    frames = []
    for line in _raw_lines(episode_dir / FRAMES_LOG)[0]:
        try:
            frames.append(protocol.decode_message(line))
        except protocol.DecodeError:
            break
    return frames


def render_episode_figure(episode_dir, out_path) -> None:
    """Three-panel sheet: top-down end-effector path with objects, joint
    trajectories, and the gripper/grasp timeline."""
    manifest = read_manifest_dir(episode_dir)
    frames = _load_frames(episode_dir)

    fig, (ax_path, ax_joints, ax_grip) = plt.subplots(
        1, 3, figsize=(13, 4.2),
        gridspec_kw={"width_ratios": [1.2, 1.2, 0.8]})
    fig.suptitle(f"{manifest['episode_id']}  scene={manifest['scene']} "
                 f"robot={manifest['robot']} label={manifest['label']}", fontsize=10)

    if frames:
        t = np.array([f.time for f in frames])
        ee = np.array([f.ee[:3] for f in frames])
        q = np.array([f.q for f in frames])

        ax_path.plot(ee[:, 0], ee[:, 1], "-", lw=1.2, color="tab:blue")
        ax_path.plot(ee[0, 0], ee[0, 1], "o", color="tab:green", label="start")
        ax_path.plot(ee[-1, 0], ee[-1, 1], "s", color="tab:red", label="end")
        for oid, pose in frames[-1].objects.items():
            ax_path.plot(pose[0], pose[1], "x", color="tab:orange")
            ax_path.annotate(oid, (pose[0], pose[1]), fontsize=7,
                             textcoords="offset points", xytext=(3, 3))
        ax_path.set_xlabel("x [m]")
        ax_path.set_ylabel("y [m]")
        ax_path.set_title("end-effector path (top-down)", fontsize=9)
        ax_path.axis("equal")
        ax_path.legend(fontsize=7, loc="best")

        for j in range(q.shape[1]):
            ax_joints.plot(t, q[:, j], lw=0.9, label=f"q{j}")
        ax_joints.set_xlabel("sim time [s]")
        ax_joints.set_ylabel("joint value")
        ax_joints.set_title("joint trajectories", fontsize=9)
        ax_joints.legend(fontsize=7, ncol=2)

        closed = np.array([1.0 if f.gripper == "closed" else 0.0 for f in frames])
        grasp = np.array([1.0 if f.grasped else 0.0 for f in frames])
        ax_grip.step(t, closed, where="post", label="gripper closed", lw=1.0)
        ax_grip.step(t, 0.5 * grasp, where="post", label="grasp held", lw=1.0)
        ax_grip.set_ylim(-0.1, 1.2)
        ax_grip.set_xlabel("sim time [s]")
        ax_grip.set_title("gripper / grasp", fontsize=9)
        ax_grip.legend(fontsize=7)
    else:
        for ax in (ax_path, ax_joints, ax_grip):
            ax.text(0.5, 0.5, "empty episode", ha="center", va="center",
                    transform=ax.transAxes)

    fig.tight_layout(rect=(0, 0, 1, 0.93))
    fig.savefig(out_path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def render_latency_figure(samples_s, out_path, p50: float, p95: float) -> None:
    samples_ms = np.asarray(samples_s) * 1000.0
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.hist(samples_ms, bins=min(20, max(5, len(samples_ms) // 2)),
            color="tab:blue", alpha=0.8)
    ax.axvline(p50 * 1000.0, color="tab:green", ls="--", lw=1.2,
               label=f"p50 = {p50 * 1000:.1f} ms")
    ax.axvline(p95 * 1000.0, color="tab:red", ls="--", lw=1.2,
               label=f"p95 = {p95 * 1000:.1f} ms")
    ax.set_xlabel("command-send to first-reflecting-frame [ms]")
    ax.set_ylabel("count")
    ax.set_title("loopback teleop latency", fontsize=10)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110, metadata={"Software": None})
    plt.close(fig)
