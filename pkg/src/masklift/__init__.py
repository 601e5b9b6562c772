"""masklift: training-free multi-view 3D object detection.

Per-frame 2D instance masks, depth maps, and camera poses are fused into
class-agnostic 3D boxes by view-consensus mask-graph clustering; an
open-vocabulary stage then labels each box by comparing provider-supplied
crop embeddings against class-name embeddings.
"""

__version__ = "0.1.0"

from .geometry import (Box3D, Detection, PixelSet, SimilarityTransform,
                       VoxelHash, align_depth_pose, align_two_poses,
                       backproject_pixel, backproject_pixels, bbox2d_from_pixels,
                       box_from_points, crop_point_cloud, iou3d, nms,
                       project_point, project_points, visible_points,
                       visible_projection)
from .scene_io import (CameraFrame, InstanceMask2D, PointCloud, Scene,
                       SceneFormatError, Vocabulary, decode_rle, encode_rle,
                       load_scene, read_detections, write_detections,
                       write_pseudo_labels, write_scene)
from .mask_graph import (MaskGraph, MaskNode, MergeConfig, build_graph,
                         consensus_rate, contains, detect_class_agnostic,
                         lift_mask, merge_step, run_detection, visible_portion)
from .ov_labeler import (CropRequest, LabelConfig, aggregate_embeddings,
                         classify, label_detections, make_crop_requests,
                         select_top_views)
from .providers import FakeProvider, ProviderError, WireProvider, open_provider
from .evaluation import (EvalReport, GroundTruthSet, evaluate_map,
                         evaluate_pr_binary, read_ground_truth,
                         write_ground_truth)

__all__ = [name for name in dir() if not name.startswith("_")]
