"""
Ledger service layer.
Records every command run and every artifact it writes.
"""
import hashlib
import json
import uuid
from datetime import datetime
from typing import Dict, List, Optional

from mvtex.models import ArtifactRecord, RunRecord, db


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


class LedgerService:
    """Service for ledger operations."""

    @staticmethod
    def start_run(command: str, config_hash: Optional[str] = None, seed: Optional[int] = None,
                  output_path: Optional[str] = None) -> RunRecord:
        run = RunRecord(
            run_id=str(uuid.uuid4())[:8],
            command=command,
            config_hash=config_hash,
            seed=seed,
            output_path=output_path,
            status='processing',
            started_at=datetime.utcnow(),
        )
        db.session.add(run)
        db.session.commit()
        return run

    @staticmethod
    def record_artifact(run: RunRecord, path: str, kind: str, config_hash: Optional[str] = None) -> ArtifactRecord:
        artifact = ArtifactRecord(
            run_id=run.id,
            path=path,
            kind=kind,
            sha256=file_sha256(path),
            config_hash=config_hash or run.config_hash,
        )
        db.session.add(artifact)
        db.session.commit()
        return artifact

    @staticmethod
    def complete_run(run: RunRecord, summary: Optional[Dict] = None) -> RunRecord:
        run.status = 'completed'
        run.summary = json.dumps(summary, sort_keys=True) if summary else None
        run.completed_at = datetime.utcnow()
        db.session.commit()
        return run

    @staticmethod
    def fail_run(run: RunRecord, error: Exception) -> RunRecord:
        db.session.rollback()
        run.status = 'failed'
        run.error = f"{type(error).__name__}: {error}"
        run.completed_at = datetime.utcnow()
        db.session.commit()
        return run

    @staticmethod
    def get_runs(command: Optional[str] = None, limit: int = 50) -> List[RunRecord]:
        """Most recent runs first."""
        query = RunRecord.query
        if command:
            query = query.filter_by(command=command)
        return query.order_by(RunRecord.id.desc()).limit(limit).all()

    @staticmethod
    def get_artifacts(run: RunRecord, kind: Optional[str] = None) -> List[ArtifactRecord]:
        query = run.artifacts
        if kind:
            query = query.filter_by(kind=kind)
        return query.order_by(ArtifactRecord.id).all()
