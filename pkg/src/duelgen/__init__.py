"""Two-fighter pose-conditioned video generation at desk scale.

A small, fully NumPy pipeline: pose parsing/rasterization/retargeting, a
lossless space-to-depth latent codec, a denoising network with masked
two-identity attention, pose and background conditioning, DDIM sampling with
clip-fusion long-video stitching, a procedural dataset forge, two-stage
finetuning, and reference quality metrics.
"""

from .errors import (ArityError, CheckpointError, DataError,
                     DegeneratePoseError, DuelgenError, EmptyPoseError,
                     ParameterError, ParseError, PolicyError, ResolutionError,
                     SamplingError, SchemaError, ShapeError, TrainingDiverged)
from .pose import (BODY18_LIMBS, MaskPyramid, PersonPose, PoseFrame,
                   PoseSequence, RasterStyle, RegionMaskSet, bbox_mask,
                   build_mask_pyramid, build_region_masks, draw_capsule,
                   load_pose_file, rasterize_pose, retarget, save_pose_file)
from .codec import (Latent, LatentClip, background_latent, decode,
                    decode_clip, encode, encode_clip, load_image, save_image)
from .denoiser import (DenoiserNet, IdAttnBlock, NetConfig, PoseGuider,
                       PromptEmbedding, ReferenceEncoder, ReferenceFeatureBank,
                       TemporalBlock, embed_prompt, encode_references,
                       id_attn_forward, level_resolutions, load_checkpoint,
                       pose_guider_forward, save_checkpoint,
                       temporal_attn_forward)
from .diffusion import (CLIP_LEN, CLIP_STRIDE, OVERLAP_LEN, Conditions,
                        NoiseSchedule, SamplerCarry, add_noise, build_pyramids,
                        ddim_step, frame_noise, make_schedule, sample_clip,
                        sample_long, step_times, training_loss)
from .forge import (ACTIONS, ForgeConfig, IdentityStyle, ManifestEntry,
                    TrainingSample, forge_fashion, forge_synthetic,
                    identity_table, load_manifest, load_sample,
                    render_fashion_clip, splice_fashion)
from .training import (Batch, RMSprop, StagePolicy, TrainConfig, TrainResult,
                       apply_freeze_policy, is_temporal_parameter, next_batch,
                       resume, stage_policy, train)
from .metrics import (AttributionCounts, MetricReport, boundary_continuity,
                      id_attribution, id_attribution_counts, psnr, ssim)

__version__ = "0.1.0"
