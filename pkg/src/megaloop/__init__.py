"""megaloop: runtime models organised in a megamodel, kept causally connected
to a simulated component system and adapted by MAPE-K feedback loops."""
from .adaptation import (AnalysisModel, ChangeModel, EvaluationModel, Infeasible, analyze, plan,
                         predict_performance)
from .coordination import (AdaptationReport, ManagerStack, NoHigherLevel, UnmappableChange,
                           adaptation_analysis, derive_actions, escalate, execute, propagate_changes,
                           rollback)
from .megamodel import Megamodel, ModelNode, OperationUnit, ProcessGraph, RelationEdge, enact
from .model import Element, Metamodel, ModelDelta, TypedModel, compose, conforms, diff, invert, patch
from .runner import run
from .scenario import load_scenario
from .simulator import Blueprint, Simulator
from .sync import SyncEngine, ViewSpec, monitor_update, project, sync_backward, sync_forward

__version__ = "0.1.0"

__all__ = [
    "AdaptationReport", "AnalysisModel", "Blueprint", "ChangeModel", "Element", "EvaluationModel",
    "Infeasible", "ManagerStack", "Megamodel", "Metamodel", "ModelDelta", "ModelNode", "NoHigherLevel",
    "OperationUnit", "ProcessGraph", "RelationEdge", "Simulator", "SyncEngine", "TypedModel",
    "UnmappableChange", "ViewSpec", "adaptation_analysis", "analyze", "compose", "conforms", "derive_actions",
    "diff", "enact", "escalate", "execute", "invert", "load_scenario", "monitor_update", "patch", "plan",
    "predict_performance", "project", "propagate_changes", "rollback", "run", "sync_backward", "sync_forward",
]
