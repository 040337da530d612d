"""Soft-masked transformer toolkit for continual learning with frozen backbones."""
