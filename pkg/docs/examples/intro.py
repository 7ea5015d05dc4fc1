import numpy as np
import evf

spec = evf.ObjectSpec.from_shape(2, mass=1.25, friction=0.6)
corpus = evf.generate_dataset(spec, N=6, T=12, seed=0)
model = evf.VisualForesight(evf.ModelConfig(hidden_dim=32))
support = evf.SupportSet(corpus.frames[1:].reshape(5, 12, -1), corpus.object_id)
c = model.context(support)
predicted = model.predict(corpus.frames[:1, :2], corpus.actions[:1], c[None], horizon=10,
                          rng=np.random.default_rng(0))
predicted.shape
