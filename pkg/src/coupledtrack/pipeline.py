"""Per-frame fusion plus tracking over a whole sequence."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .kalman import CouplingWeights, NoiseConfig
from .observations import FusionWeights, SizeStats, fuse_frame
from .tracker import HypothesisTracker, TrackerConfig, TrackReport


@dataclass
class PipelineConfig:
    fusion: FusionWeights = field(default_factory=FusionWeights)
    coupling: CouplingWeights = field(default_factory=CouplingWeights)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    size_stats: SizeStats = field(default_factory=SizeStats.default)
    iou_threshold: float = 0.5


@dataclass(frozen=True)
class RunMode:
    no_flow: bool = False          # drop proposal velocities
    detections_only: bool = False  # ignore proposals entirely
    coupling: bool = True          # False forces w_a = 1, w_b = 0
    two_d_only: bool = False       # image-space tracking only


def prepare_frame(dets, props, mode: RunMode):
    if mode.detections_only or mode.two_d_only:
        return dets, []
    if mode.no_flow:
        props = [p.without_velocity() for p in props]
    return dets, props


def make_tracker(config: PipelineConfig, mode: RunMode = RunMode()) -> HypothesisTracker:
    tcfg = config.tracker
    if mode.two_d_only and not tcfg.two_d_only:
        tcfg = replace(tcfg, two_d_only=True)
    coupling = config.coupling if mode.coupling else CouplingWeights.decoupled()
    return HypothesisTracker(tcfg, coupling, config.noise, config.size_stats)


def fuse_sequence(frames, contexts, config: PipelineConfig, mode: RunMode = RunMode()):
    """Fused observations for every frame; ``frames[k] = (detections, proposals)``."""
    out = []
    for (dets, props), ctx in zip(frames, contexts):
        dets, props = prepare_frame(dets, props, mode)
        out.append(fuse_frame(dets, props, config.size_stats, ctx, config.fusion))
    return out


def track_observations(observations, contexts, config: PipelineConfig,
                       mode: RunMode = RunMode()) -> TrackReport:
    tracker = make_tracker(config, mode)
    report = TrackReport()
    for obs, ctx in zip(observations, contexts):
        report.add(ctx.frame, tracker.advance_frame(obs, ctx))
    return report


def run(frames, contexts, config: PipelineConfig | None = None,
        mode: RunMode = RunMode()) -> TrackReport:
    """Fuse and track a sequence frame by frame."""
    config = config or PipelineConfig()
    tracker = make_tracker(config, mode)
    report = TrackReport()
    for (dets, props), ctx in zip(frames, contexts):
        dets, props = prepare_frame(dets, props, mode)
        obs = fuse_frame(dets, props, config.size_stats, ctx, config.fusion)
        report.add(ctx.frame, tracker.advance_frame(obs, ctx))
    return report
