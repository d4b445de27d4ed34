from typing import Any, ClassVar, Dict, List

from pydantic import BaseModel, Field


class LossReport(BaseModel):
    loss_simple: float
    loss_vlb: float
    total: float


class MetricsReport(BaseModel):
    psnr: float
    nrmse: float
    ssim: float
    mask_voxels: int
    z_tv: float
    activity_ratio: float

    # Echoed into every report header
    conventions: Dict[str, str] = Field(
        default_factory=lambda: {
            "psnr_peak": "masked reference maximum",
            "psnr_cap_db": "300",
            "nrmse_normalizer": "reference L2 norm over mask",
            "ssim": "2D per slice, gaussian 11x11 sigma 1.5, mean over masked window centres",
        }
    )


class MetricsRow(BaseModel):
    volume_id: str
    fraction: float
    report: MetricsReport

    CSV_FIELDS: ClassVar[List[str]] = [
        "volume_id", "fraction", "psnr_db", "nrmse", "ssim", "z_tv", "activity_ratio", "mask_voxels",
    ]

    def as_csv_row(self) -> List[Any]:
        r = self.report
        return [self.volume_id, self.fraction, r.psnr, r.nrmse, r.ssim, r.z_tv, r.activity_ratio, r.mask_voxels]


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any]
    seeds: Dict[str, int]
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    digest_algorithm: str = "sha256"
