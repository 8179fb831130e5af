"""Shared-autonomy driving coach.

A desk-scale racing simulator with a PID autopilot, per-channel control
blending, skill discovery over expert demos, a coach that estimates which
skill sits in a student's zone of proximal development, and a five-stage
study protocol that runs simulated cohorts end to end.
"""

from .vehicle import Action, VehicleParams, VehicleState, step
from .track import Track
from .trajectory import Trajectory, from_samples, resample_1hz
from .blending import BlendConfig, SaMode, UNASSISTED, apply_revert, blend, skill_sa
from .autopilot import (AutopilotController, ExpertBank, PidGains,
                        generate_expert_demos)
from .skills import (ClusterMap, FeedbackAnnotation, Segmentation, Skill,
                     SkillLibrary, attach_annotations, compression_ratio,
                     fit_library, load_annotations, reconstruction_mse,
                     segment_dp, skill_to_control)
from .zpd import (CoachDecision, ZpdScores, align, average_trajectories,
                  choose_skill, score, zpd_report, zpd_scores)
from .students import (StudentDriver, StudentProfile, ground_truth_zpd,
                       load_cohort, make_cohort, practice_update, save_cohort)
from .simulate import SimSession, TrialResult, run_practice, run_trial
from .metrics import (StageMetrics, TrialMetrics, delta_table, dtw, mean_ci,
                      spectrum_rmse, steering_fft, trial_metrics, welch_t)
from .protocol import (StudyConfig, run_modeling_benchmark, run_study)
from .server import ServerConfig, SessionEngine, build_app

__version__ = "0.1.0"

__all__ = [
    "Action", "VehicleParams", "VehicleState", "step",
    "Track", "Trajectory", "from_samples", "resample_1hz",
    "BlendConfig", "SaMode", "UNASSISTED", "apply_revert", "blend", "skill_sa",
    "AutopilotController", "ExpertBank", "PidGains", "generate_expert_demos",
    "ClusterMap", "FeedbackAnnotation", "Segmentation", "Skill", "SkillLibrary",
    "attach_annotations", "compression_ratio", "fit_library",
    "load_annotations", "reconstruction_mse", "segment_dp", "skill_to_control",
    "CoachDecision", "ZpdScores", "align", "average_trajectories",
    "choose_skill", "score", "zpd_report", "zpd_scores",
    "StudentDriver", "StudentProfile", "ground_truth_zpd", "load_cohort",
    "make_cohort", "practice_update", "save_cohort",
    "SimSession", "TrialResult", "run_practice", "run_trial",
    "StageMetrics", "TrialMetrics", "delta_table", "dtw", "mean_ci",
    "spectrum_rmse", "steering_fft", "trial_metrics", "welch_t",
    "StudyConfig", "run_modeling_benchmark", "run_study",
    "ServerConfig", "SessionEngine", "build_app",
    "__version__",
]
