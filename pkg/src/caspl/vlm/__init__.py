"""Miniature dual-encoder vision-language model."""
from .model import (
    STUDENT_CONFIG, TEACHER_CONFIG, EncoderConfig, MiniClip, PromptSegment,
    write_model_manifest, zero_shot_probs,
)
from .text import TEMPLATES, TemplateSpec, tokenize
