"""Multi-view LIDAR/camera 3D object detection pipeline at desk scale."""

__version__ = "0.1.0"
