"""Glue between configuration and the per-module building blocks."""

from __future__ import annotations

from .config import PipelineConfig
from .descriptors import FeaturePyramid, extract_pyramid
from .errors import EmptyCloudError
from .octree import build_pyramid
from .pointcloud import PointCloud, voxel_downsample
from .registration import RegistrationResult, register_features


def featurize(cloud: PointCloud, cfg: PipelineConfig | None = None) -> FeaturePyramid:
    """Voxel-downsample, build the octree and extract every level's descriptors."""
    cfg = cfg or PipelineConfig()
    if len(cloud) == 0:
        raise EmptyCloudError(f"cloud {cloud.id!r} is empty")
    down = voxel_downsample(cloud, cfg.octree.voxel)
    pyr = build_pyramid(down, cfg.octree.depth, cfg.octree.levels)
    return extract_pyramid(down, pyr, cfg.descriptors)


def register_clouds(query: PointCloud, target: PointCloud,
                    cfg: PipelineConfig | None = None) -> RegistrationResult:
    cfg = cfg or PipelineConfig()
    return register_features(featurize(query, cfg), featurize(target, cfg), cfg.reg)
