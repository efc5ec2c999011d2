from .exitcode_plugin import exitcode_plugin
from .config_plugin import config_plugin
from .manifest_plugin import manifest_plugin, RunManifest
from .simulate_plugin import simulate_plugin
from .train_plugin import train_plugin
from .eval_plugin import eval_plugin
from .infer_plugin import infer_plugin
from .ablate_plugin import ablate_plugin
