"""Fixed-lag factor-graph smoother fusing IMU, LiDAR odometry and radar velocity."""
from .factors import (
    BiasWalkFactor,
    ImuFactor,
    LidarFactor,
    MarginalPrior,
    PriorFactor,
    RadarFactor,
    huber_loss,
    huber_weight,
    imu_residual,
    lidar_residual,
    radar_residual,
)
from .initialization import NonStaticStart, StaticAlignment, static_initialize
from .preintegration import ImuNoise, PreintegratedImuDelta, preintegrate
from .smoother import MODALITIES, EstimatorConfig, FixedLagSmoother, IngestStats
from .types import (
    STATE_DIM,
    Extrinsics,
    ImuMeasurement,
    LidarRelativePose,
    NavState,
    RadarVelocityFactorInput,
    StaleMeasurement,
)
from .window import FactorGraphWindow, OptimizeResult

__all__ = [name for name in dir() if not name.startswith("_")]
