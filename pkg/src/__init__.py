__all__ = ["config", "geometry", "scene_io", "reconstruction", "alignment", "rendering", "evaluation", "synth_oracle", "simcli"]
