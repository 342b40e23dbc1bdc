"""Volumetric performance capture from sparse views: probabilistic visual hulls refined by a
3D convolutional encoder/decoder with a pose-regressing latent, adversarial training and an
LSTM pose smoother.  Everything runs on a small double-precision numpy NN kernel."""
from .camera import Camera, CameraExtrinsics, CameraIntrinsics, project, project_voxel, world_to_camera
from .evaluation import MetricReport, mpjpe, run_ablation, volume_mse
from .model import Decoder, Encoder, Generator, ModelConfig, dual_loss
from .pvh import GridSpec, VoxelGrid, build_pvh, rotate_vertical
from .synthetic import GenerationConfig, TripletDataset, generate_triplets
from .temporal import PoseSmoother, SmootherConfig
from .training import TrainConfig, pretrain_encoder, train_full

__version__ = "0.1.0"
