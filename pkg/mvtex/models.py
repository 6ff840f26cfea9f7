"""
Database models for the run ledger.
SQLite by default; any SQLAlchemy URL works through DATABASE_URL.
"""
import json
from datetime import datetime

from flask_sqlalchemy import SQLAlchemy

db = SQLAlchemy()


class RunRecord(db.Model):
    """One invocation of a command."""
    __tablename__ = 'runs'

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.String(50), unique=True, nullable=False)
    command = db.Column(db.String(50), nullable=False)  # gen-dataset, train, generate, ...
    config_hash = db.Column(db.String(12))
    seed = db.Column(db.Integer)
    output_path = db.Column(db.String(500))

    # Status
    status = db.Column(db.String(20), default='pending')  # pending, processing, completed, failed
    error = db.Column(db.Text)
    summary = db.Column(db.Text)  # JSON
    started_at = db.Column(db.DateTime)
    completed_at = db.Column(db.DateTime)
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    artifacts = db.relationship('ArtifactRecord', backref='run', lazy='dynamic')

    def to_dict(self) -> dict:
        return {
            'run_id': self.run_id,
            'command': self.command,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'output_path': self.output_path,
            'status': self.status,
            'error': self.error,
            'summary': json.loads(self.summary) if self.summary else None,
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'completed_at': self.completed_at.isoformat() if self.completed_at else None,
            'artifacts': [a.to_dict() for a in self.artifacts],
        }

    def __repr__(self):
        return f'<RunRecord {self.command} {self.run_id} {self.status}>'


class ArtifactRecord(db.Model):
    """A file written by a run."""
    __tablename__ = 'artifacts'

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('runs.id'), nullable=False)
    path = db.Column(db.String(500), nullable=False)
    kind = db.Column(db.String(50))  # image, conditions, checkpoint, manifest, log, texture, report
    sha256 = db.Column(db.String(64))
    config_hash = db.Column(db.String(12))
    created_at = db.Column(db.DateTime, default=datetime.utcnow)

    def to_dict(self) -> dict:
        return {
            'path': self.path,
            'kind': self.kind,
            'sha256': self.sha256,
            'config_hash': self.config_hash,
            'created_at': self.created_at.isoformat() if self.created_at else None,
        }

    def __repr__(self):
        return f'<ArtifactRecord {self.kind} {self.path}>'
