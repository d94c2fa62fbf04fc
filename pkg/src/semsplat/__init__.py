"""CPU semantic Gaussian splatting for sparse-view synthetic scenes."""

from .geometry import Camera, GaussianSet, Projected2D, build_covariance3d, eval_sh, project_gaussian
from .heads import SemanticHeads, TextBank, segmentation_logits
from .rasterizer import RenderGrads, RenderOutput, render, render_backward
from .reference import render_reference
from .scenegen import LayoutPoints, SceneDataset, TeacherScene, make_dataset, make_teacher_scene
from .trainer import Checkpoint, TrainConfig, run_pipeline, train_phase

__all__ = [
    "Camera", "GaussianSet", "Projected2D", "build_covariance3d", "eval_sh",
    "project_gaussian", "SemanticHeads", "TextBank", "segmentation_logits",
    "RenderGrads", "RenderOutput", "render", "render_backward", "render_reference",
    "LayoutPoints", "SceneDataset", "TeacherScene", "make_dataset",
    "make_teacher_scene", "Checkpoint", "TrainConfig", "run_pipeline", "train_phase",
]
