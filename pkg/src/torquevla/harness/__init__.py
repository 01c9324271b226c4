from .manifest import RunManifest, code_hash, find_manifests, workspace_root

__all__ = ["RunManifest", "code_hash", "find_manifests", "workspace_root"]
