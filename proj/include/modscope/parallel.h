// Copyright 2026 The Modscope Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MODSCOPE_PARALLEL_H_
#define MODSCOPE_PARALLEL_H_

#include <functional>

namespace modscope {

// Thread count from MODSCOPE_THREADS, else the hardware concurrency.
int DefaultThreadCount();

// Runs fn(0..n-1) on up to `threads` workers. Each index must write only its
// own output slot; the first exception (by index) is rethrown after all
// workers finish.
void ParallelFor(int n, const std::function<void(int)>& fn, int threads = 0);

}  // namespace modscope

#endif  // MODSCOPE_PARALLEL_H_
